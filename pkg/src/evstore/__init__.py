"""evstore: a desk-scale event store.

An always-online header catalog indirecting into bulk payload files, a
simulated disk+tape storage manager, a buffered recording pipeline,
byte-range data servers and a backend migration path.
"""

__version__ = "0.1.0"
