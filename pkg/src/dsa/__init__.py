"""dsa: a flow-sensitive abstract interpreter with dynamic shortcuts.

The analyzer runs a small imperative language (closures, heap objects,
first-order operators) three ways: concretely, abstractly over a
per-label view map, and in a sealed mode where a concrete run carries
opaque placeholders for the values the analysis could not pin down.
The shortcut engine switches between the abstract and sealed modes
without giving up soundness of the final fixpoint.
"""
from __future__ import annotations

__version__ = "0.1.0"
