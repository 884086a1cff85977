"""Dynamic graph convolutional recurrent network for traffic-speed forecasting."""

__version__ = "0.1.0"
