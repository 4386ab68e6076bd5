from __future__ import annotations

import json
import shutil
import sys
import textwrap
from typing import Any, TextIO

_RESET = "\033[0m"
_GREEN = "\033[92m"
_CYAN = "\033[96m"
_YELLOW = "\033[93m"
_RED = "\033[91m"
_DIM = "\033[2m"


def _width() -> int:
    return max(60, min(shutil.get_terminal_size((88, 24)).columns, 120))


def _line(char: str = "═") -> str:
    return char * (_width() - 2)


def _print_box(title: str, message: str, color: str, stream: TextIO | None = None) -> None:
    stream = stream or sys.stdout
    inner_width = _width() - 4
    print(f"{color}╔{_line()}╗{_RESET}", file=stream)
    print(f"{color}║ {title.ljust(inner_width)} ║{_RESET}", file=stream)
    print(f"{color}╠{_line('─')}╣{_RESET}", file=stream)
    for paragraph in message.splitlines() or [""]:
        wrapped = textwrap.wrap(paragraph, width=inner_width) or [""]
        for chunk in wrapped:
            print(f"{color}║ {chunk.ljust(inner_width)} ║{_RESET}", file=stream)
    print(f"{color}╚{_line()}╝{_RESET}", file=stream)


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (dict, list)):
        return json.dumps(value, default=str)
    return str(value)


def print_banner(command: str) -> None:
    title = f" OPTIWING3D // {command.upper()} "
    bar = "=" * max(10, (_width() - len(title)) // 2)
    print(f"{_CYAN}{bar}{title}{bar}{_RESET}")


def _labeled(data: dict[str, Any], prefix: str = "") -> list[str]:
    lines = []
    for key, value in data.items():
        if isinstance(value, dict) and value and len(value) <= 12:
            lines.extend(_labeled(value, f"{prefix}{key}."))
        else:
            lines.append(f"{prefix}{key}: {_format_value(value)}")
    return lines


def print_result(command: str, data: dict[str, Any]) -> None:
    lines = _labeled({key: value for key, value in data.items() if key != "warnings"})
    _print_box(command.upper(), "\n".join(lines), _GREEN)
    for message in data.get("warnings") or []:
        print_warning(message)


def print_json(envelope: dict[str, Any]) -> None:
    print(json.dumps(envelope, indent=2, sort_keys=True, default=str))


def print_info(message: str) -> None:
    print(f"{_DIM}{message}{_RESET}")


def print_warning(message: str) -> None:
    print(f"{_YELLOW}WARNING: {message}{_RESET}", file=sys.stderr)


def print_error(code: str, message: str) -> None:
    _print_box(f"ERROR: {code}", message, _RED, stream=sys.stderr)
