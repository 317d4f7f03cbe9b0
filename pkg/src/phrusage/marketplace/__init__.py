"""Data marketplace service layer and its persistent stores."""

from .service import (
    ENDPOINTS,
    Client,
    LocalClient,
    MarketplaceService,
    RequestError,
    ServiceHandle,
    search_listings,
    serve,
)
from .store import Listing, MarketState, StoredBundle, StorePaths, load, persist

__all__ = [
    "ENDPOINTS", "Client", "LocalClient", "MarketplaceService", "RequestError", "ServiceHandle",
    "search_listings", "serve", "Listing", "MarketState", "StoredBundle", "StorePaths", "load",
    "persist",
]
