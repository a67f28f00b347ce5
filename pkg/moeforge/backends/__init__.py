"""Backends package; importing it registers every backend."""

from moeforge.backends import http  # noqa: F401
from moeforge.backends import mock  # noqa: F401
