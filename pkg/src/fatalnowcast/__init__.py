"""Nowcasting fatal infections from daily snapshots and regional mortality modeling."""

__version__ = "0.1.0"
