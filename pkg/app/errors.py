from __future__ import annotations

from typing import Any

from fastapi import HTTPException


class OptiwingError(HTTPException):
    """Failure carrying a stable code, shared by the service and the CLI.

    4xx statuses are input problems, 5xx statuses are computation failures.
    """

    def __init__(
        self,
        code: str,
        message: str,
        status_code: int = 400,
        details: dict[str, Any] | None = None,
    ) -> None:
        error: dict[str, Any] = {"code": code, "message": message}
        if details:
            error["details"] = details
        super().__init__(status_code=status_code, detail={"error": error})

    @property
    def code(self) -> str:
        return self.detail["error"]["code"]

    @property
    def message(self) -> str:
        return self.detail["error"]["message"]


def exit_code_for(error: OptiwingError) -> int:
    if error.status_code >= 500:
        return 1
    return 2
