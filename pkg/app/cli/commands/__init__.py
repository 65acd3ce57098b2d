"""
Command modules; each exposes ``register(subparsers)`` and ``handle(args)``
"""
