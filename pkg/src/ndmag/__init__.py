"""Vector magnetometry from wide-field ODMR image stacks of randomly oriented NV diamonds."""

__version__ = "0.1.0"
