"""Interval-chained signatures for VoIP calls: signing engines, a network
simulator, an archive service and an offline auditor."""

__version__ = "0.1.0"
