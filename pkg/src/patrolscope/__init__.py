"""Police-presence measurement from smartphone GPS pings."""

__version__ = "0.1.0"
