"""Pluggable annotation backends and the classification prompt renderer/parser.

The annotator seam stands in for an external labeling service: a seeded
ground-truth oracle with configurable noise, a majority vote over the teacher
ensemble, or an HTTP endpoint speaking a small JSON protocol.
"""

from __future__ import annotations

import json
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .graph import TagGraph
from .selection import DnsResult

STATUS_OK = "ok"
STATUS_PARSE_FAILED = "parse_failed"
STATUS_TIMEOUT = "timeout"


@dataclass
class AnnotationRecord:
    """One annotation attempt for one node."""

    node: int
    prompt: str
    category: int | None        # class index; None unless status == "ok"
    raw: str                    # raw backend response (external backend only)
    status: str                 # "ok" | "parse_failed" | "timeout"


def split_title_abstract(text: str) -> tuple[str, str]:
    """Split a node text into title/abstract: first line vs the rest.

    Single-line texts reuse the line for both fields; the synthetic corpus
    has no separate title material.
    """
    text = text.strip()
    if "\n" in text:
        head, tail = text.split("\n", 1)
        return head.strip(), tail.strip()
    return text, text


def render_classification_prompt(graph: TagGraph, node: int, neighbors, category_names) -> str:
    """Render the zero-shot classification prompt for one target node.

    System block: the category list (verbatim names) and response
    requirements. User block: Title/Abstract of the target followed by one
    Related Title/Related Abstract pair per merged neighbor, in ascending
    neighbor-id order.
    """
    category_names = list(category_names)
    if len(category_names) != graph.c:
        raise ValueError(f"{len(category_names)} category names for {graph.c} classes")
    if isinstance(neighbors, DnsResult):
        neighbor_ids = [int(x) for x in neighbors.merged]
    else:
        neighbor_ids = sorted(int(x) for x in neighbors)

    listed = ", ".join(category_names)
    lines = [
        f"System: Papers in this field can be divided into {graph.c} categories: [{listed}]. "
        f"You will serve as an assistant to help me classify a target paper into one of the "
        f"{graph.c} categories above, based on its description and the descriptions of related papers.",
        "Requirements:",
        "1. Pick exactly one category from the list; do not invent new categories.",
        '2. Provide your response in JSON format with the two keys "Reasoning" '
        '(a brief justification) and "Category" (the chosen category name).',
        "",
        "User:",
    ]
    title, abstract = split_title_abstract(graph.texts[node])
    lines.append(f"Title: {title}")
    lines.append(f"Abstract: {abstract}")
    for nid in neighbor_ids:
        r_title, r_abstract = split_title_abstract(graph.texts[nid])
        lines.append(f"Related Title: {r_title}")
        lines.append(f"Related Abstract: {r_abstract}")
    return "\n".join(lines)


def parse_annotation_response(raw: str, category_names) -> int | None:
    """Extract the "Category" field from the first JSON object in `raw`.

    The value is matched case-insensitively against the category names; an
    exact unique match is required. Returns the class index, or None when no
    JSON object is found, the field is missing, or the category is unknown.
    """
    decoder = json.JSONDecoder()
    obj = None
    for pos, ch in enumerate(raw):
        if ch != "{":
            continue
        try:
            obj, _ = decoder.raw_decode(raw, pos)
        except json.JSONDecodeError:
            continue
        break
    if not isinstance(obj, dict):
        return None
    value = None
    for key, val in obj.items():
        if isinstance(key, str) and key.strip().lower() == "category":
            value = val
            break
    if not isinstance(value, str):
        return None
    want = value.strip().casefold()
    matches = [i for i, name in enumerate(category_names) if name.strip().casefold() == want]
    if len(matches) != 1:
        return None
    return matches[0]


@dataclass
class GroundTruthOracle:
    """True label with probability 1 - noise_rate, else a uniform wrong label.

    Per-node deterministic: the RNG is keyed by (seed, node), so the same
    node gets the same answer regardless of call order.
    """

    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")

    def annotate(self, graph: TagGraph, node: int, prompt: str) -> AnnotationRecord:
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 53, int(node))))
        true = int(graph.labels[node])
        if rng.random() < self.noise_rate:
            wrong = int(rng.integers(graph.c - 1))
            label = wrong + (1 if wrong >= true else 0)
        else:
            label = true
        return AnnotationRecord(node=int(node), prompt=prompt, category=label, raw="", status=STATUS_OK)


@dataclass
class MajorityTeacherVote:
    """Modal argmax over the teacher ensemble's probability rows."""

    teacher_probs: np.ndarray     # (B, N, C)

    def annotate(self, graph: TagGraph, node: int, prompt: str) -> AnnotationRecord:
        votes = np.argmax(self.teacher_probs[:, node, :], axis=1)
        counts = np.bincount(votes, minlength=graph.c)
        label = int(counts.argmax())              # argmax keeps the lowest class on ties
        return AnnotationRecord(node=int(node), prompt=prompt, category=label, raw="", status=STATUS_OK)


@dataclass
class ExternalHttp:
    """POSTs {"prompt": ...} to an endpoint and parses the JSON answer.

    Expects a 200 response whose body contains a JSON object with "Category"
    and "Reasoning" string fields (extra fields ignored). max_retries counts
    additional attempts after the first.
    """

    endpoint: str
    category_names: list[str]
    timeout: float = 30.0
    max_retries: int = 2

    def __post_init__(self) -> None:
        if not self.endpoint:
            raise ValueError("ExternalHttp needs a nonempty endpoint")

    def annotate(self, graph: TagGraph, node: int, prompt: str) -> AnnotationRecord:
        body = json.dumps({"prompt": prompt}).encode("utf-8")
        raw = ""
        for _ in range(self.max_retries + 1):
            request = urllib.request.Request(
                self.endpoint, data=body, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(request, timeout=self.timeout) as response:
                    raw = response.read().decode("utf-8", errors="replace")
            except (urllib.error.URLError, TimeoutError, OSError):
                continue
            category = parse_annotation_response(raw, self.category_names)
            if category is not None:
                return AnnotationRecord(int(node), prompt, category, raw, STATUS_OK)
            return AnnotationRecord(int(node), prompt, None, raw, STATUS_PARSE_FAILED)
        return AnnotationRecord(int(node), prompt, None, raw, STATUS_TIMEOUT)


def annotate(kind, graph: TagGraph, node: int, prompt: str) -> AnnotationRecord:
    """Dispatch to an annotator backend instance."""
    return kind.annotate(graph, node, prompt)
