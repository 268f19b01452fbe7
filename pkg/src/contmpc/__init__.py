"""Continuation-method suboptimal MPC and contraction certificates."""
