"""Zero-copy multi-tenant serverless dataplane over an emulated RDMA fabric."""

__version__ = "0.1.0"
