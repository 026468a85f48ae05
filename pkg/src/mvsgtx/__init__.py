"""In-memory multi-version transaction engine with serialization-graph
concurrency control, OCC and 2PL baselines, benchmark workloads, and a
view-serializability checking oracle."""

__version__ = "0.1.0"
