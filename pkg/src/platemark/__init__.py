"""platemark: license-plate auction price estimation, price distributions,
and similar-plate search."""

__version__ = "0.1.0"
