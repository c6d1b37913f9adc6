"""Process address spaces, page-granular translation and the pagemap oracle.

Physical frames come from a seeded, shuffled free list so that placements
differ between victim restarts but are reproducible for a fixed seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAGE_SIZE = 4096


class MemoryError_(Exception):
    """Base class for address-space errors."""


class OutOfPhysicalMemory(MemoryError_):
    pass


class PageFault(MemoryError_):
    pass


class PagemapDenied(MemoryError_):
    pass


@dataclass(frozen=True)
class MappingDescriptor:
    virtual_base: int
    length: int
    frames: tuple[int, ...]
    shared_object: str | None = None
    offset: int = 0
    page_size: int = PAGE_SIZE

    @property
    def end(self) -> int:
        return self.virtual_base + self.length

    def contains(self, vaddr: int) -> bool:
        return self.virtual_base <= vaddr < self.end

    def page_base(self, index: int) -> int:
        """Physical base address of the index-th page of the mapping."""
        return self.frames[index] * self.page_size


class PhysicalMemory:
    """Frame allocator plus the registry of shared objects.

    Shared objects keep their frames for the lifetime of the allocator, so
    every process mapping the same object at the same offset gets the same
    physical pages.
    """

    def __init__(self, size: int, page_size: int = PAGE_SIZE, seed: int = 0):
        if size % page_size:
            raise ValueError("physical memory size must be a multiple of the page size")
        self.size = size
        self.page_size = page_size
        rng = np.random.default_rng(seed)
        self._free = [int(f) for f in rng.permutation(size // page_size)]
        self._shared: dict[str, list[int]] = {}

    @property
    def frames_free(self) -> int:
        return len(self._free)

    def allocate(self, count: int) -> list[int]:
        if count > len(self._free):
            raise OutOfPhysicalMemory(f"requested {count} frames, {len(self._free)} free")
        frames = self._free[-count:] if count else []
        del self._free[len(self._free) - count:]
        return frames[::-1]

    def shared_frames(self, obj: str, first_page: int, pages: int) -> list[int]:
        frames = self._shared.setdefault(obj, [])
        missing = first_page + pages - len(frames)
        if missing > 0:
            frames.extend(self.allocate(missing))
        return frames[first_page:first_page + pages]


@dataclass
class ProcessSpace:
    process_id: int | str
    memory: PhysicalMemory
    pagemap_restricted: bool = False
    mappings: list[MappingDescriptor] = field(default_factory=list)
    next_vaddr: int = 0x10000000

    @property
    def page_size(self) -> int:
        return self.memory.page_size

    def _round(self, length: int) -> int:
        if length <= 0:
            raise ValueError("mapping length must be positive")
        ps = self.page_size
        return -(-length // ps) * ps

    def _place(self, length: int, frames: list[int], obj: str | None, offset: int) -> MappingDescriptor:
        m = MappingDescriptor(self.next_vaddr, length, tuple(frames), obj, offset, self.page_size)
        # one guard page between mappings
        self.next_vaddr += length + self.page_size
        self.mappings.append(m)
        return m

    def map_shared(self, obj: str, length: int, offset: int = 0) -> MappingDescriptor:
        length = self._round(length)
        if offset % self.page_size:
            raise ValueError("offset must be page aligned")
        first = offset // self.page_size
        frames = self.memory.shared_frames(obj, first, length // self.page_size)
        return self._place(length, frames, obj, offset)

    def map_private(self, length: int) -> MappingDescriptor:
        length = self._round(length)
        frames = self.memory.allocate(length // self.page_size)
        return self._place(length, frames, None, 0)

    def mapping_for(self, vaddr: int) -> MappingDescriptor:
        for m in self.mappings:
            if m.contains(vaddr):
                return m
        raise PageFault(f"unmapped virtual address {vaddr:#x} in process {self.process_id}")

    def translate(self, vaddr: int) -> int:
        m = self.mapping_for(vaddr)
        rel = vaddr - m.virtual_base
        return m.frames[rel // self.page_size] * self.page_size + rel % self.page_size

    def pagemap_query(self, vaddr: int) -> int:
        """Translation as seen through the pagemap interface."""
        paddr = self.translate(vaddr)
        if self.pagemap_restricted:
            raise PagemapDenied(f"pagemap access denied for process {self.process_id}")
        return paddr
