"""
Named, dotted-path access to the weights of a model.

A store built from a module references the live tensors of that module:
freezing an entry toggles requires_grad on the underlying parameter,
and copying into an entry updates the module in place.
"""
import fnmatch
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import torch
from radvit.exceptions import ConfigError, ShapeError
from torch import nn


@dataclass
class StoreEntry:
    tensor: torch.Tensor
    buffer: bool = False
    _frozen: bool = False

    @property
    def frozen(self) -> bool:
        if self.buffer:
            return True
        if isinstance(self.tensor, nn.Parameter):
            return not self.tensor.requires_grad
        return self._frozen

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.tensor.shape)


class ParameterStore:
    def __init__(self) -> None:
        self._entries: "OrderedDict[str, StoreEntry]" = OrderedDict()
        self.step = 0
        # filled by load_checkpoint
        self.metadata: Dict[str, object] = {}

    @classmethod
    def from_module(
        cls, module: nn.Module, prefix: str = "", include_buffers: bool = True
    ) -> "ParameterStore":
        store = cls()
        for name, param in module.named_parameters():
            store.add(_join(prefix, name), param)
        if include_buffers:
            for name, buf in module.named_buffers():
                if buf is None:
                    continue
                store._add(_join(prefix, name), StoreEntry(buf, buffer=True))
        return store

    @classmethod
    def from_tensors(
        cls, tensors: Mapping[str, torch.Tensor], frozen: Optional[List[str]] = None
    ) -> "ParameterStore":
        store = cls()
        frozen_paths = set(frozen or [])
        for path, tensor in tensors.items():
            store.add(path, tensor, frozen=path in frozen_paths)
        return store

    def add(self, path: str, tensor: torch.Tensor, frozen: bool = False) -> None:
        self._add(path, StoreEntry(tensor, _frozen=frozen))
        if frozen and isinstance(tensor, nn.Parameter):
            tensor.requires_grad_(False)

    def _add(self, path: str, entry: StoreEntry) -> None:
        if path in self._entries:
            raise ConfigError(f"Duplicated parameter path: {path}")
        self._entries[path] = entry

    def __contains__(self, path: object) -> bool:
        return path in self._entries

    def __getitem__(self, path: str) -> torch.Tensor:
        try:
            return self._entries[path].tensor
        except KeyError:
            raise ConfigError(f"Unknown parameter path: {path}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def paths(self) -> List[str]:
        return list(self._entries)

    def items(self) -> Iterator[Tuple[str, torch.Tensor]]:
        for path, entry in self._entries.items():
            yield path, entry.tensor

    def entry(self, path: str) -> StoreEntry:
        if path not in self._entries:
            raise ConfigError(f"Unknown parameter path: {path}")
        return self._entries[path]

    def is_frozen(self, path: str) -> bool:
        return self.entry(path).frozen

    def is_buffer(self, path: str) -> bool:
        return self.entry(path).buffer

    def match(self, pattern: str) -> List[str]:
        return [p for p in self._entries if fnmatch.fnmatchcase(p, pattern)]

    def _set_frozen(self, pattern: str, frozen: bool) -> int:
        count = 0
        for path in self.match(pattern):
            entry = self._entries[path]
            if entry.buffer:
                continue
            entry._frozen = frozen
            if isinstance(entry.tensor, nn.Parameter):
                entry.tensor.requires_grad_(not frozen)
            count += 1
        return count

    def freeze(self, pattern: str = "*") -> int:
        return self._set_frozen(pattern, True)

    def unfreeze(self, pattern: str = "*") -> int:
        return self._set_frozen(pattern, False)

    def set(self, path: str, value: torch.Tensor) -> None:
        target = self[path]
        if tuple(value.shape) != tuple(target.shape):
            raise ShapeError(
                f"{path}: cannot assign shape {tuple(value.shape)} "
                f"to {tuple(target.shape)}"
            )
        with torch.no_grad():
            target.copy_(value.to(dtype=target.dtype, device=target.device))

    def structure(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(p, e.shape) for p, e in self._entries.items()]

    def select(self, prefix: str) -> "ParameterStore":
        """View over the entries under prefix, sharing the same tensors"""
        view = ParameterStore()
        view.step = self.step
        for path, entry in self._entries.items():
            if path == prefix or path.startswith(f"{prefix}."):
                view._entries[path] = entry
        return view

    def snapshot(self) -> Dict[str, torch.Tensor]:
        return {p: e.tensor.detach().clone() for p, e in self._entries.items()}

    def trainable_count(self) -> int:
        return sum(
            e.tensor.numel()
            for e in self._entries.values()
            if not e.buffer and not e.frozen
        )

    def total_count(self) -> int:
        return sum(e.tensor.numel() for e in self._entries.values() if not e.buffer)

    def copy_from(self, other: "ParameterStore", strict: bool = True) -> int:
        """Copy every tensor of other with a matching path; returns the copied count"""

        missing = [p for p in self._entries if p not in other]
        unexpected = [p for p in other if p not in self._entries]
        if strict and (missing or unexpected):
            raise ConfigError(
                f"Parameter structure mismatch: missing={missing[:5]}, "
                f"unexpected={unexpected[:5]}"
            )
        copied = 0
        for path in self._entries:
            if path in other:
                self.set(path, other[path])
                copied += 1
        self.step = other.step
        return copied

    def load_into(
        self, module: nn.Module, prefix: str = "", strict: bool = True
    ) -> None:
        target = ParameterStore.from_module(module, prefix=prefix)
        source = self.select(prefix) if prefix else self
        target.copy_from(source, strict=strict)

    def frozen_paths(self) -> List[str]:
        return [p for p, e in self._entries.items() if e.frozen and not e.buffer]


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name
