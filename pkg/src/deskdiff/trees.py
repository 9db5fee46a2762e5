"""Flatten nested weight trees (dicts and lists of arrays) to dotted names."""

from __future__ import annotations


def flatten_tree(tree, prefix: str = "") -> dict:
    """Leaves of a dict/list nest keyed by dotted paths like 'blocks.0.wq'."""
    flat = {}
    if isinstance(tree, dict):
        for key, value in tree.items():
            flat.update(flatten_tree(value, f"{prefix}{key}."))
    elif isinstance(tree, list):
        for i, value in enumerate(tree):
            flat.update(flatten_tree(value, f"{prefix}{i}."))
    else:
        flat[prefix[:-1]] = tree
    return flat


def tree_like(template, flat: dict, prefix: str = ""):
    """Rebuild template's nesting with leaves looked up from a flat dict."""
    if isinstance(template, dict):
        return {k: tree_like(v, flat, f"{prefix}{k}.") for k, v in template.items()}
    if isinstance(template, list):
        return [tree_like(v, flat, f"{prefix}{i}.") for i, v in enumerate(template)]
    return flat[prefix[:-1]]
