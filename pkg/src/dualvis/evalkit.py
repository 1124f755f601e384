"""Benchmark scoring, report tables, scaling curves, and the judge workflow.

Prediction files are JSON Lines, one record per line::

    {"task": "obj_count", "question_id": "q17", "predicted": 4, "gold": 5}
    {"task": "rel_dir", "question_id": "q18", "predicted": "b", "gold": "B"}

``kind`` may be given explicitly; otherwise it is inferred from the task.
Numeric tasks are scored by mean relative accuracy over a threshold ladder,
multiple-choice tasks by case-insensitive exact match on the option letter.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Sequence

import httpx

log = logging.getLogger(__name__)

NUMERIC_TASKS = ("obj_count", "abs_dist", "obj_size", "room_size")
MCQ_TASKS = ("rel_dist", "rel_dir", "route_plan", "appr_order")
TASKS = NUMERIC_TASKS + MCQ_TASKS
TASK_LABELS = {
    "obj_count": "Obj. Count",
    "abs_dist": "Abs. Dist.",
    "obj_size": "Obj. Size",
    "room_size": "Room Size",
    "rel_dist": "Rel. Dist.",
    "rel_dir": "Rel. Dir.",
    "route_plan": "Route Plan",
    "appr_order": "Appr. Order",
}
NUMERIC, MULTIPLE_CHOICE = "numeric", "multiple_choice"

MRA_THRESHOLDS = tuple(Fraction(50 + 5 * i, 100) for i in range(10))  # 0.50 .. 0.95


class KindError(ValueError):
    pass


class RecordError(ValueError):
    pass


class InputError(ValueError):
    pass


class JudgeParseError(ValueError):
    pass


class TransportError(RuntimeError):
    pass


class ServiceError(RuntimeError):
    pass


def task_kind(task: str) -> str:
    if task in NUMERIC_TASKS:
        return NUMERIC
    if task in MCQ_TASKS:
        return MULTIPLE_CHOICE
    raise RecordError(f"unknown task {task!r}")


@dataclass(frozen=True)
class PredictionRecord:
    task: str
    question_id: str
    kind: str
    predicted: float | str
    gold: float | str

    def __post_init__(self):
        if self.kind != task_kind(self.task):
            raise KindError(f"{self.question_id}: task {self.task} is {task_kind(self.task)}, not {self.kind}")


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    """Parse a JSONL prediction file; any malformed line aborts with its number."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                if not isinstance(d, dict):
                    raise ValueError("record is not an object")
                task = d["task"]
                kind = d.get("kind") or task_kind(task)
                pred, gold = d["predicted"], d["gold"]
                if kind == NUMERIC:
                    pred, gold = _number(pred), _number(gold)
                else:
                    pred, gold = str(pred), str(gold)
                records.append(PredictionRecord(task, str(d["question_id"]), kind, pred, gold))
            except (KeyError, ValueError, TypeError) as e:
                raise RecordError(f"{path}:{lineno}: {e}") from e
    return records


def _number(x) -> float:
    if isinstance(x, bool):
        raise ValueError(f"not a number: {x!r}")
    v = float(x)
    if not math.isfinite(v):
        raise ValueError(f"not a finite number: {x!r}")
    return v


# ---------------------------------------------------------------------------
# scorers


def _require_kind(records: Sequence[PredictionRecord], kind: str) -> None:
    if not records:
        raise InputError("score is undefined for an empty record set")
    wrong = [r.question_id for r in records if r.kind != kind]
    if wrong:
        raise KindError(f"expected only {kind} records; got others: {wrong[:5]}")


def score_mcq(records: Sequence[PredictionRecord]) -> float:
    _require_kind(records, MULTIPLE_CHOICE)
    hits = sum(str(r.predicted).strip().upper() == str(r.gold).strip().upper() for r in records)
    return 100.0 * hits / len(records)


def score_mra(records: Sequence[PredictionRecord], thresholds: Iterable = MRA_THRESHOLDS) -> float:
    """Mean relative accuracy in percent.

    A record passes threshold t when ``|pred - gold| / |gold| < 1 - t``. The
    comparison is done in exact rational arithmetic on the float inputs, with
    thresholds read as decimals, so boundary cases never flip on rounding.
    """
    _require_kind(records, NUMERIC)
    ts = [Fraction(str(t)) if not isinstance(t, Fraction) else t for t in thresholds]
    if not ts:
        raise InputError("need at least one threshold")
    passed = 0
    for r in records:
        gold = Fraction(r.gold)
        if gold == 0:
            raise RecordError(f"{r.question_id}: gold is zero, relative error undefined")
        rel = abs(Fraction(r.predicted) - gold) / abs(gold)
        passed += sum(rel < 1 - t for t in ts)
    return 100.0 * passed / (len(records) * len(ts))


def score_task(task: str, records: Sequence[PredictionRecord], thresholds=MRA_THRESHOLDS) -> float:
    if task_kind(task) == NUMERIC:
        return score_mra(records, thresholds)
    return score_mcq(records)


# ---------------------------------------------------------------------------
# reports


@dataclass
class ScoreReport:
    task_scores: dict[str, float]
    counts: dict[str, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def present(self) -> list[str]:
        return [t for t in TASKS if t in self.task_scores]

    @property
    def absent(self) -> list[str]:
        return [t for t in TASKS if t not in self.task_scores]

    @property
    def average(self) -> float:
        """Unweighted mean over the tasks that have records."""
        if not self.task_scores:
            raise InputError("no task has records")
        return math.fsum(self.task_scores[t] for t in self.present) / len(self.present)

    @classmethod
    def from_task_scores(cls, scores: dict[str, float]) -> "ScoreReport":
        unknown = set(scores) - set(TASKS)
        if unknown:
            raise InputError(f"unknown tasks: {sorted(unknown)}")
        for t, v in scores.items():
            if not 0.0 <= v <= 100.0:
                raise InputError(f"{t} score {v} outside [0, 100]")
        rep = cls(dict(scores))
        rep.warnings = [f"task {t} absent; excluded from average" for t in rep.absent]
        return rep

    def to_dict(self) -> dict:
        return {
            "task_scores": {t: self.task_scores[t] for t in self.present},
            "counts": {t: self.counts[t] for t in self.present if t in self.counts},
            "average": self.average,
            "absent": self.absent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        rep = cls.from_task_scores({k: float(v) for k, v in d["task_scores"].items()})
        rep.counts = {k: int(v) for k, v in d.get("counts", {}).items()}
        return rep

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "score", "count"])
        w.writerow(["average", repr(self.average), sum(self.counts.values())])
        for t in self.present:
            w.writerow([t, repr(self.task_scores[t]), self.counts.get(t, "")])
        return buf.getvalue()

    def to_markdown(self, method: str = "model") -> str:
        head = ["Method", "Average"] + [TASK_LABELS[t] for t in TASKS]
        cells = [method, f"{self.average:.1f}"]
        cells += [f"{self.task_scores[t]:.1f}" if t in self.task_scores else "-" for t in TASKS]
        lines = [
            "Numerical Answer: " + ", ".join(TASK_LABELS[t] for t in NUMERIC_TASKS)
            + ". Multiple-Choice Answer: " + ", ".join(TASK_LABELS[t] for t in MCQ_TASKS) + ".",
            "",
            "| " + " | ".join(head) + " |",
            "|" + "|".join(["---"] * len(head)) + "|",
            "| " + " | ".join(cells) + " |",
        ]
        return "\n".join(lines) + "\n"


def emit_report(records: Sequence[PredictionRecord], thresholds=MRA_THRESHOLDS, method: str = "model"):
    """Score every task present, warn on absent ones. Returns (report, markdown)."""
    by_task: dict[str, list[PredictionRecord]] = {}
    for r in records:
        by_task.setdefault(r.task, []).append(r)
    scores = {t: score_task(t, by_task[t], thresholds) for t in TASKS if t in by_task}
    rep = ScoreReport.from_task_scores(scores)
    rep.counts = {t: len(by_task[t]) for t in scores}
    for w in rep.warnings:
        log.warning(w)
    return rep, rep.to_markdown(method)


# ---------------------------------------------------------------------------
# scaling curves


def emit_scaling_curve(points: Sequence[tuple[float, ScoreReport]], width: int = 50) -> tuple[str, str]:
    """CSV of per-task and average scores by data fraction, plus a text chart."""
    if not points:
        raise InputError("need at least one (fraction, report) point")
    fracs = [f for f, _ in points]
    for f in fracs:
        if not 0.0 < f <= 1.0:
            raise InputError(f"fraction {f} outside (0, 1]")
    if len(set(fracs)) != len(fracs):
        raise InputError("duplicate fractions")
    if any(b <= a for a, b in zip(fracs, fracs[1:])):
        raise InputError("fractions must be strictly increasing")

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fraction", "average", *TASKS])
    for f, rep in points:
        w.writerow([repr(f), repr(rep.average), *(repr(rep.task_scores[t]) if t in rep.task_scores else "" for t in TASKS)])

    lines = ["average score vs. training-data fraction", ""]
    for f, rep in points:
        bar = "#" * round(width * rep.average / 100.0)
        lines.append(f"{f * 100:6.1f}% | {bar:<{width}} {rep.average:.2f}")
    return buf.getvalue(), "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# judge workflow

JUDGE_KEYS = ("A", "B", "C", "D")

JUDGE_TEMPLATE = """\
The following are detailed descriptions of the same video, generated by four different Vision-Language Large Models (VLLMs). These models will be referred to as Model A, Model B, Model C, and Model D.

Your task is to critically evaluate and score the output from each of these VLLMs. The scoring scale is from 0 (minimum) to 10 (maximum).

Please ensure your evaluation addresses at least the following dimensions for each model's description:

1.  Richness of Detail: How comprehensive and specific are the details provided about the video's content?
2.  Accuracy: How accurately does the description reflect the presumed events, objects, and context within the video?
3.  Organization/Coherence : How logically structured, clear, and easy to follow is the description? Is there a coherent narrative or flow?
4.  Language Fluency: How natural, grammatically correct, and well-phrased is the language used?
5.  Information Redundancy or Repetition: Does the description contain unnecessary repetition of information or superfluous content?

After providing your detailed textual evaluation for each model, discussing its performance across these dimensions, please conclude by returning only the final scores in the precise JSON format exemplified below.

```json
{
  "A": <score_for_model_A>,
  "B": <score_for_model_B>,
  "C": <score_for_model_C>,
  "D": <score_for_model_D>
}
```

[A]

{A}

[B]

{B}

[C]

{C}

[D]

{D}"""


@dataclass(frozen=True)
class JudgeRequest:
    request_id: str
    prompt: str


@dataclass(frozen=True)
class JudgeScores:
    scores: dict[str, int]

    def __getitem__(self, key: str) -> int:
        return self.scores[key]


def build_judge_prompt(descriptions: dict[str, str]) -> str:
    missing = [k for k in JUDGE_KEYS if not str(descriptions.get(k, "")).strip()]
    if missing:
        raise InputError(f"missing or empty descriptions for: {missing}")
    out = JUDGE_TEMPLATE
    # Substitute in one pass so description text containing "{B}" etc. is left alone.
    return re.sub(r"\{([ABCD])\}", lambda m: descriptions[m.group(1)], out)


_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n(.*?)```", re.S)


def _last_json_object(text: str) -> str | None:
    end = text.rfind("}")
    while end != -1:
        depth = 0
        for i in range(end, -1, -1):
            if text[i] == "}":
                depth += 1
            elif text[i] == "{":
                depth -= 1
                if depth == 0:
                    return text[i : end + 1]
        end = text.rfind("}", 0, end)
    return None


def parse_judge_scores(response_text: str) -> JudgeScores:
    """Read the four integer scores from the last structured block.

    The last fenced code block wins; a response without fences falls back to
    its last brace-delimited object. Nothing is clamped.
    """
    blocks = _FENCE.findall(response_text)
    body = blocks[-1][1] if blocks else _last_json_object(response_text)
    if body is None:
        raise JudgeParseError("no score block found")
    try:
        data = json.loads(body)
    except json.JSONDecodeError as e:
        raise JudgeParseError(f"score block is not valid JSON: {e.msg}") from e
    if not isinstance(data, dict):
        raise JudgeParseError("score block is not an object")
    scores = {}
    for k in JUDGE_KEYS:
        if k not in data:
            raise JudgeParseError(f"missing score for model {k}")
        v = data[k]
        if isinstance(v, bool) or not isinstance(v, int):
            raise JudgeParseError(f"score for model {k} is not an integer: {v!r}")
        if not 0 <= v <= 10:
            raise JudgeParseError(f"score for model {k} out of range 0..10: {v}")
        scores[k] = v
    return JudgeScores(scores)


def aggregate_judge_scores(results: Sequence[JudgeScores]) -> dict[str, float]:
    """Per-model arithmetic mean over all judged videos."""
    if not results:
        raise InputError("nothing to aggregate")
    return {k: math.fsum(r[k] for r in results) / len(results) for k in JUDGE_KEYS}


API_KEY_ENV = "DUALVIS_JUDGE_API_KEY"
ENDPOINT_ENV = "DUALVIS_JUDGE_ENDPOINT"
OFFLINE_ENV = "DUALVIS_JUDGE_OFFLINE"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
DEFAULT_JUDGE_MODEL = "gpt-4.1-mini"


class JudgeClient:
    """Sends one prompt per request to a chat-completions style endpoint.

    Offline mode reads ``<fixtures_dir>/<request_id>.txt`` instead of calling
    out. Transport failures, 429 and 5xx responses are retried with
    exponential backoff; other non-success statuses fail immediately.
    Every exchange is logged and kept in ``audit_entries``; ``write_audit``
    saves them sorted by request id and attempt, so the file does not depend
    on thread scheduling.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str = DEFAULT_JUDGE_MODEL,
        offline: bool | None = None,
        fixtures_dir: str | Path | None = None,
        max_attempts: int = 3,
        backoff: float = 1.0,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV, DEFAULT_ENDPOINT)
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.model = model
        if offline is None:
            offline = os.environ.get(OFFLINE_ENV, "") not in ("", "0", "false")
        self.offline = offline
        self.fixtures_dir = Path(fixtures_dir) if fixtures_dir else None
        if self.offline and self.fixtures_dir is None:
            raise InputError("offline mode needs a fixtures directory")
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout
        self.transport = transport
        self.sleep = sleep
        self.audit_entries: list[dict] = []
        self._lock = threading.Lock()

    def _audit(self, entry: dict) -> None:
        log.debug("judge exchange: %s", json.dumps(entry))
        with self._lock:
            self.audit_entries.append(entry)

    def write_audit(self, path: str | Path) -> None:
        entries = sorted(self.audit_entries, key=lambda e: (e["id"], e.get("attempt", 0)))
        with open(path, "w") as fh:
            for e in entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    def __call__(self, request: JudgeRequest) -> str:
        if self.offline:
            path = self.fixtures_dir / f"{request.request_id}.txt"
            try:
                text = path.read_bytes().decode("utf-8")
            except FileNotFoundError:
                raise InputError(f"no fixture for request {request.request_id} at {path}") from None
            self._audit({"id": request.request_id, "attempt": 0, "offline": True,
                         "prompt": request.prompt, "response": text})
            return text
        if not self.api_key:
            raise InputError(f"set {API_KEY_ENV} to call the judge endpoint")
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": request.prompt}],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_err = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                with httpx.Client(transport=self.transport, timeout=self.timeout) as client:
                    resp = client.post(self.endpoint, json=payload, headers=headers)
            except httpx.TransportError as e:
                last_err = TransportError(f"attempt {attempt}: {type(e).__name__}: {e}")
                self._audit({"id": request.request_id, "attempt": attempt, "prompt": request.prompt,
                             "error": str(last_err)})
            else:
                self._audit({
                    "id": request.request_id, "attempt": attempt, "status": resp.status_code,
                    "prompt": request.prompt, "response": resp.text,
                })
                if resp.status_code == 200:
                    return _response_text(resp)
                err = ServiceError(f"judge returned HTTP {resp.status_code}: {resp.text[:200]}")
                if resp.status_code != 429 and resp.status_code < 500:
                    raise err
                last_err = err
            log.warning("judge request %s failed (%s)", request.request_id, last_err)
            if attempt < self.max_attempts:
                self.sleep(self.backoff * 2 ** (attempt - 1))
        raise last_err


def _response_text(resp: httpx.Response) -> str:
    try:
        return resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise ServiceError(f"unexpected response body: {resp.text[:200]}") from None


def judge_many(
    client: Callable[[JudgeRequest], str],
    requests: Sequence[JudgeRequest],
    max_in_flight: int = 4,
) -> list[tuple[str, JudgeScores]]:
    """Query and parse every request; results come back sorted by request id."""
    def one(req):
        return req.request_id, parse_judge_scores(client(req))

    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        results = list(pool.map(one, requests))
    return sorted(results, key=lambda r: r[0])


def load_descriptions(root: str | Path) -> list[tuple[str, dict[str, str]]]:
    """``<root>/<video_id>/{A,B,C,D}.txt`` -> [(video_id, {key: text})], sorted."""
    root = Path(root)
    out = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        texts = {}
        for k in JUDGE_KEYS:
            f = d / f"{k}.txt"
            if not f.exists():
                raise InputError(f"{d.name}: missing {k}.txt")
            texts[k] = f.read_text()
        out.append((d.name, texts))
    if not out:
        raise InputError(f"no description folders under {root}")
    return out
