"""Grounded language for a mock driving stack.

A token mixer compresses the stack's intermediate outputs into a fixed set
of context tokens; a frozen toy decoder reads them through zero-initialized
gated attention and answers questions whose answers can be checked
against the stack itself.
"""
__version__ = "0.1.0"
