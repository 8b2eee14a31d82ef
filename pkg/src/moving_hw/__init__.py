"""Helmholtz-Weyl decomposition and time-periodic Navier-Stokes on moving domains."""

from moving_hw.config import RunConfig, load_config, parse_config
from moving_hw.context import Context
from moving_hw.graph import graph

__all__ = ["Context", "RunConfig", "graph", "load_config", "parse_config"]
