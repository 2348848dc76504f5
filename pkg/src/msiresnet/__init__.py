"""From-scratch numpy networks for binary MSI/MSS tile classification."""

__version__ = "0.1.0"
