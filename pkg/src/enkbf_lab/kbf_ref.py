"""Reference Kalman-Bucy filter, importable under its module name.

The implementation lives in :mod:`enkbf_lab.kbf`; this module re-exports it.
"""
from .kbf import (KbfState, KbfTrajectory, kbf_step, riccati_drift, run_kbf,
                  second_order_term, write_trajectory_csv)

__all__ = ["KbfState", "KbfTrajectory", "kbf_step", "riccati_drift", "run_kbf",
           "second_order_term", "write_trajectory_csv"]
