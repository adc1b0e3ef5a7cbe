"""Rotorguard - rotor-failure-aware quadrotor flight stack and benchmark harness."""

__version__ = "0.1.0"
