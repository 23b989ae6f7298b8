"""Numerical core: linear algebra, encoder, calibration, compression and cost model."""
