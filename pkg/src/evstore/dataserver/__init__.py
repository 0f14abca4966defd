"""Byte-range data serving and load balancing."""

from .balance import CatalogAffinity, Choice, ClientLibrary, Endpoint, choose_server
from .client import DataClient, ScanResult
from .query import EventRange, split_query
from .server import DataServer, ServerFarm, ServerProcess

__all__ = ["CatalogAffinity", "Choice", "ClientLibrary", "Endpoint", "choose_server",
           "DataClient", "ScanResult", "EventRange", "split_query", "DataServer", "ServerFarm",
           "ServerProcess"]
