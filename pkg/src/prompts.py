"""Prompt templates with named ``{placeholder}`` fields."""
from __future__ import annotations

from pathlib import Path
from string import Formatter
from typing import Iterable, List

from config import settings

NONE_MARKER = "(none)"


class PromptError(KeyError):
    """Raised when a template placeholder has no value."""


def load_template(name: str, prompt_dir: Path | None = None) -> str:
    path = Path(prompt_dir or settings.DATA_DIR / "prompts") / f"{name}.txt"
    return path.read_text(encoding="utf-8")


def placeholders(template: str) -> List[str]:
    """Names of the fields in ``template`` in order of appearance."""
    return [field for _, field, _, _ in Formatter().parse(template) if field]


def render(template: str, **fields: str) -> str:
    missing = [name for name in placeholders(template) if name not in fields]
    if missing:
        raise PromptError(f"unbound placeholder(s): {', '.join(missing)}")
    return template.format(**fields)


def section(items: Iterable[str], bullet: str = "- ") -> str:
    """Render ``items`` one per line, or the explicit none marker."""
    items = list(items)
    if not items:
        return NONE_MARKER
    return "\n".join(f"{bullet}{item}" for item in items)
