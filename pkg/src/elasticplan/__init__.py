"""Elastic resource planning and dynamic data sharding for distributed training jobs."""

__version__ = "0.1.0"
