"""Offline policy evaluation and policy iteration by stochastic approximation on dependent data."""
