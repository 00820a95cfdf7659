"""Partial fine-tuning: which encoder groups stay trainable."""

from __future__ import annotations

import re

from ..model import ParamStore

# encoder groups each policy keeps trainable; everything outside the
# transformer blocks (stem, positional embedding, decoder, refiner) always is
POLICIES: dict[str, frozenset[str]] = {
    "full": frozenset({"ln", "attn", "ffn", "cls"}),
    "none": frozenset(),
    "ln": frozenset({"ln"}),
    "ln+attn": frozenset({"ln", "attn"}),
    "ln+ffn": frozenset({"ln", "ffn"}),
}

_BLOCK_GROUP = re.compile(r"^encoder\.block\d+\.(ln1|ln2|attn|ffn)\.")


def encoder_group(name: str) -> str | None:
    """``ln``, ``attn``, ``ffn`` or ``cls`` for frozen-able tensors, else None."""
    if name == "encoder.cls_token":
        return "cls"
    if name.startswith("encoder.norm."):
        return "ln"
    m = _BLOCK_GROUP.match(name)
    if m is None:
        return None
    group = m.group(1)
    return "ln" if group.startswith("ln") else group


def normalize_policy(policy: str) -> str:
    key = policy.strip().lower().replace(" ", "")
    if key not in POLICIES:
        raise ValueError(f"unknown fine-tuning policy {policy!r}; choose from full, none, LN, LN+ATTN, LN+FFN")
    return key


def apply_freeze_mask(params: ParamStore, policy: str) -> ParamStore:
    """Set trainability in place (frozen tensors get zeroed grads)."""
    keep = POLICIES[normalize_policy(policy)]
    for name in params.names():
        group = encoder_group(name)
        params.set_trainable(name, group is None or group in keep)
    return params
