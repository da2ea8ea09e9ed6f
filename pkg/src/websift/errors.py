"""Shared exception base for the toolkit.

Every error raised on a contract violation derives from WebsiftError so the
CLI can map failures to a diagnostic on stderr and exit code 1. Plain OSError
is allowed to propagate from file plumbing where nothing domain-specific can
be added.
"""


class WebsiftError(Exception):
    """Base class for all toolkit errors."""
