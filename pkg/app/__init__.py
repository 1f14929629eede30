"""
TriDomain Retrieval
Cross-domain product retrieval over product pages, short videos and live streams
"""

__version__ = "1.0.0"
