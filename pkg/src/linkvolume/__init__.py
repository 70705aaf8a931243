"""Per-link vehicle volume estimation from mobile device location sightings."""

__version__ = "0.1.0"
