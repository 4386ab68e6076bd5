"""Run event log: one JSON line per pipeline step event."""

from __future__ import annotations

import json
import warnings
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any
from uuid import uuid4

from app.errors import OptiwingError


EVENT_STATUSES = ("started", "ok", "warning", "failed")


@dataclass(frozen=True)
class RunEvent:
    event_id: str
    step: str
    status: str
    run_id: str | None
    payload: dict[str, Any] | None
    created_at: datetime

    def to_dict(self) -> dict[str, Any]:
        return {**asdict(self), "created_at": self.created_at.isoformat()}

    @classmethod
    def from_dict(cls, item: dict[str, Any]) -> RunEvent:
        return cls(
            event_id=item["event_id"],
            step=item["step"],
            status=item["status"],
            run_id=item.get("run_id"),
            payload=item.get("payload"),
            created_at=datetime.fromisoformat(item["created_at"]),
        )

    def belongs_to(self, step: str) -> bool:
        """Dotted steps nest: `diffusion.train` covers `diffusion.train.epoch`."""
        return self.step == step or self.step.startswith(f"{step}.")


class RunLog:
    def __init__(self, path: Path | None = None) -> None:
        self.path = path
        self._events: list[RunEvent] = self._read(path) if path else []

    @staticmethod
    def _read(path: Path) -> list[RunEvent]:
        if not path.exists():
            return []
        events = []
        for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                events.append(RunEvent.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise OptiwingError(
                    "audit_store_corrupt",
                    f"Run log {path} cannot be parsed at line {number}.",
                    status_code=500,
                ) from exc
        return events

    def append(
        self,
        step: str,
        status: str,
        payload: dict[str, Any] | None = None,
        run_id: str | None = None,
    ) -> RunEvent:
        if status not in EVENT_STATUSES:
            raise OptiwingError(
                "invalid_event_status",
                f"Unknown event status {status!r}; use one of {', '.join(EVENT_STATUSES)}.",
                status_code=500,
            )
        event = RunEvent(
            event_id=uuid4().hex,
            step=step,
            status=status,
            run_id=run_id,
            payload=payload,
            created_at=datetime.now(timezone.utc),
        )
        self._events.append(event)
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(event.to_dict(), default=str) + "\n")
        return event

    def query(
        self,
        step: str | None = None,
        run_id: str | None = None,
        status: str | None = None,
        since: datetime | None = None,
        limit: int | None = None,
    ) -> list[RunEvent]:
        events = [
            event
            for event in self._events
            if (step is None or event.belongs_to(step))
            and (run_id is None or event.run_id == run_id)
            and (status is None or event.status == status)
            and (since is None or event.created_at >= since)
        ]
        return events[-limit:] if limit is not None else events


run_log = RunLog()


def configure_audit_store(path: Path | None) -> None:
    global run_log
    run_log = RunLog(path)


def record_event(
    step: str,
    status: str,
    payload: dict[str, Any] | None = None,
    run_id: str | None = None,
) -> None:
    run_log.append(step, status, payload, run_id)


@contextmanager
def audited_step(step: str, run_id: str | None = None) -> Iterator[list[str]]:
    """Record warnings raised inside the block as `warning` events.

    An OptiwingError leaving the block is recorded as a `failed` event with its code.
    """
    messages: list[str] = []
    failure: OptiwingError | None = None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            yield messages
        except OptiwingError as exc:
            failure = exc
            raise
        finally:
            for item in caught:
                message = str(item.message)
                messages.append(message)
                run_log.append(step, "warning", {"message": message}, run_id)
            if failure is not None:
                run_log.append(step, "failed", {"code": failure.code, "message": failure.message}, run_id)


def list_events(params: dict[str, Any]) -> dict[str, Any]:
    since_value = params.get("since")
    limit_value = params.get("limit")
    status = params.get("status")
    try:
        since = datetime.fromisoformat(since_value) if since_value else None
        limit = int(limit_value) if limit_value is not None else None
    except (TypeError, ValueError) as exc:
        raise OptiwingError("invalid_audit_query", "since must be ISO 8601 and limit an integer.") from exc
    if status is not None and status not in EVENT_STATUSES:
        raise OptiwingError("invalid_audit_query", f"status must be one of {', '.join(EVENT_STATUSES)}.")
    if limit is not None and limit < 0:
        raise OptiwingError("invalid_audit_query", "limit must not be negative.")
    events = run_log.query(
        step=params.get("step"),
        run_id=params.get("run_id"),
        status=status,
        since=since,
        limit=limit,
    )
    return {"status": "ok", "data": {"events": [event.to_dict() for event in events]}}
