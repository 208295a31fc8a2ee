from .ga_core import PermuteAttack
from .model import ModelHandle

__all__ = ["PermuteAttack", "ModelHandle"]
