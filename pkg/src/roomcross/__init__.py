"""Imitation learning for a simulated drone crossing obstacle rooms.

Modules: ``world`` (rooms and kinematics), ``sensors`` (depth and RGB
cameras), ``expert`` (behavior arbitration), ``nn`` (networks, loss, Adam),
``data`` and ``training`` (datasets, BPTT schemes, DAgger), ``evaluation``
(rollouts and metrics), ``datastore`` (file formats) and ``cli``.
"""

__version__ = "0.1.0"
