"""Autonomous improvement loop: scheduling, gating, verification and simulation."""

from __future__ import annotations

__version__ = "0.1.0"
