"""Parameter containers: named traversal over nested Tensor attributes."""

from __future__ import annotations

from .tensor import Tensor


def _key_of(k) -> str:
    if isinstance(k, str):
        return k
    if isinstance(k, tuple):
        return "+".join(str(getattr(m, "value", m)) for m in k)
    return str(getattr(k, "value", k))


class ParamGroup:
    """Base for structured parameter trees.

    Walks instance attributes in insertion order; Tensor attributes are
    parameters, nested ParamGroups / dicts / lists recurse. Attribute order
    is therefore the canonical (deterministic) parameter order used by the
    optimizer and checkpoints.
    """

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            yield from _walk(path, value)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()


def _walk(path: str, value):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield path, value
    elif isinstance(value, ParamGroup):
        yield from value.named_parameters(prefix=path + ".")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(f"{path}.{_key_of(k)}", v)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(f"{path}.{i}", v)
    # anything else (ints, strings, configs) is not a parameter
