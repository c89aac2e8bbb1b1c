"""
Memory management for l2l-pcm.
"""

from l2l_pcm.memory.memory_manager import MemoryManager

__all__ = ["MemoryManager"]
