"""GeoUnify: retrieval, re-ranking and metric localization of ground panoramas against aerial tiles."""

__version__ = "0.1.0"
