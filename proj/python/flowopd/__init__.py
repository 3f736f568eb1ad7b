"""Flow-matching policies, GRPO teachers and on-policy distillation on a planar toy world."""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401
