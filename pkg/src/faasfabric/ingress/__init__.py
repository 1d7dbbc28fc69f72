"""Cluster ingress: HTTP termination, early conversion to fabric buffers, worker autoscaling."""
from faasfabric.ingress.autoscaler import Autoscaler, AutoscalerConfig, ScaleAction
from faasfabric.ingress.gateway import (
    ClientConn,
    ConversionEntry,
    Gateway,
    IngressWorker,
    SimIngress,
    WorkerCost,
    WorkerState,
    rss_dispatch,
    rss_hash,
)
from faasfabric.ingress.http import ClientConnection, HttpError, HttpRequest, HttpResponse, ServerConnection

__all__ = [
    "Autoscaler", "AutoscalerConfig", "ScaleAction",
    "ClientConn", "ConversionEntry", "Gateway", "IngressWorker", "SimIngress", "WorkerCost",
    "WorkerState", "rss_dispatch", "rss_hash",
    "ClientConnection", "HttpError", "HttpRequest", "HttpResponse", "ServerConnection",
]
