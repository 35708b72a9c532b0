"""Shared console: step banners and logging setup."""

from __future__ import annotations

import logging

from rich.console import Console
from rich.logging import RichHandler

console = Console(highlight=False)

WIDTH = 60


def banner(title: str) -> None:
    console.print("=" * WIDTH)
    console.print(title)
    console.print("=" * WIDTH)


def footer() -> None:
    console.print("=" * WIDTH)


def ok(message: str) -> None:
    console.print(f"✅ {message}")


def fail(message: str) -> None:
    console.print(f"❌ {message}")


def note(message: str) -> None:
    console.print(f"  - {message}")


def setup_logging(level: str = "INFO") -> None:
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=False)],
        force=True,
    )
