from .layout import LayoutController
from .search import SearchController

__all__ = ["LayoutController", "SearchController"]
