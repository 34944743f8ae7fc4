"""netnum: compile centralized network-utility problems into distributed
per-layer control programs and execute them in a simulated multi-hop
wireless network."""

__version__ = "0.1.0"
