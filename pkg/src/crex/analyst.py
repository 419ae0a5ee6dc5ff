"""Client for the external analyst model.

The analyst answers two kinds of questions about hard cases: what
distinguishes two similar relations (one sentence, used inside positive
demonstration blocks), and why a prediction was wrong plus why the gold
answer is right (used to annotate hard cases and inside negative
demonstration blocks).

Three modes:

- ``remote``   — render the prompt and POST it to an ``/analyze`` endpoint;
- ``fallback`` — deterministic offline template answers (default);
- ``replay``   — answers must come from the persisted cache; a miss is an
                 error, which keeps replayed runs honest.

Remote failures and malformed responses degrade to the fallback answers,
flagged in the returned provenance, never to an exception.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from pathlib import Path
from typing import Dict, Optional, Tuple

from .corpus import RelationLabel, Sample
from .transport import ServiceClient, TransportError

logger = logging.getLogger(__name__)

MODE_REMOTE = "remote"
MODE_FALLBACK = "fallback"
MODE_REPLAY = "replay"

_KEY_SEP = "\x1f"

_QUOTE_MAP = str.maketrans({"“": '"', "”": '"', "‘": "'", "’": "'"})


class AnalystReplayError(RuntimeError):
    """A replay-mode request missed the cache."""


def render_contrast_prompt(
    relation: RelationLabel,
    similar_relation: RelationLabel,
    example: Sample,
    similar_example: Sample,
) -> str:
    """Prompt asking for the one-sentence difference between two relations,
    each illustrated by one example sentence."""
    return (
        "I am doing a relation extraction task. Now I have two very similar "
        "relations for you. Please tell me the difference between them in "
        f'one sentence. For the first sentence: "{example.sentence}", the '
        f'relation between "{example.head.text}" and "{example.tail.text}" '
        f'is "{relation}"; For the second sentence: '
        f'"{similar_example.sentence}", the relation between '
        f'"{similar_example.head.text}" and "{similar_example.tail.text}" '
        f'is "{similar_relation}"; Now please tell me the difference between '
        f'"{relation}" and "{similar_relation}" in one sentence. Please '
        'return the answer in JSON format as follows: {"difference": xxx}.'
    )


def render_error_prompt(sample: Sample, wrong: RelationLabel) -> str:
    """Prompt asking why ``wrong`` was predicted and why the gold relation
    is correct, one sentence each."""
    return (
        f'For this sentence: "{sample.sentence}", the correct relation '
        f'between "{sample.head.text}" and "{sample.tail.text}" should be '
        f'"{sample.relation}", but it is predicted to be "{wrong}". Please '
        "analyze the reason for the error in one sentence and provide an "
        "analysis of the correct answer in one sentence. Please return the "
        'answer in JSON format as follows:{"error_reason": xxx, '
        '"correct_answer_analysis": xxx}.'
    )


def fallback_contrast(
    relation: RelationLabel, similar_relation: RelationLabel
) -> str:
    return (
        f"'{relation}' and '{similar_relation}' differ in the granularity "
        "or type of the linked entities."
    )


def fallback_error_analysis(
    sample: Sample, wrong: RelationLabel
) -> Tuple[str, str]:
    reason = f"The model predicted '{wrong}' instead of '{sample.relation}'."
    analysis = (
        f"The correct relation is '{sample.relation}' because the sentence "
        "states it directly."
    )
    return reason, analysis


def _strip_wrapping_quotes(value: str) -> str:
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
        return value[1:-1]
    return value


def extract_fields(response: str, keys: Tuple[str, ...]) -> Optional[Dict[str, str]]:
    """Pull the requested keys out of a JSON-ish response.

    Tries strict JSON first (after normalizing curly quotes), then a
    position-based scan that tolerates unquoted values and missing commas,
    which real chat models produce routinely.
    """
    text = response.translate(_QUOTE_MAP)
    match = re.search(r"\{.*\}", text, re.DOTALL)
    if not match:
        return None
    blob = match.group(0)
    for attempt in (blob, blob.replace("'", '"')):
        try:
            obj = json.loads(attempt)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict) and all(
            isinstance(obj.get(k), str) and obj[k].strip() for k in keys
        ):
            return {k: obj[k].strip() for k in keys}
    # Lenient scan: locate each "key": marker and slice between markers.
    markers = []
    for key in keys:
        found = re.search(rf"[\"']?{re.escape(key)}[\"']?\s*:", blob)
        if not found:
            return None
        markers.append((found.start(), found.end(), key))
    markers.sort()
    out: Dict[str, str] = {}
    for i, (_, value_start, key) in enumerate(markers):
        stop = markers[i + 1][0] if i + 1 < len(markers) else len(blob) - 1
        value = _strip_wrapping_quotes(blob[value_start:stop].strip().rstrip(",").strip())
        if not value:
            return None
        out[key] = value
    return out


class AnalystClient:
    """Caching client for the two analyst prompts.

    Contrast answers are cached by relation pair and error analyses by
    sample id, so each question is asked at most once per run; with a cache
    file, at most once ever.
    """

    def __init__(
        self,
        mode: str = MODE_FALLBACK,
        base_url: Optional[str] = None,
        token_env: Optional[str] = None,
        cache_path: Optional[Path] = None,
        client: Optional[ServiceClient] = None,
    ):
        if mode not in (MODE_REMOTE, MODE_FALLBACK, MODE_REPLAY):
            raise ValueError(f"unknown analyst mode {mode!r}")
        if mode == MODE_REMOTE and base_url is None and client is None:
            raise ValueError("remote analyst mode requires a base_url")
        self.mode = mode
        self._client = client
        if mode == MODE_REMOTE and self._client is None:
            assert base_url is not None
            self._client = ServiceClient(base_url, token_env=token_env)
        self.cache_path = Path(cache_path) if cache_path is not None else None
        self._lock = threading.Lock()
        self._cache: Dict[str, dict] = {}
        if self.cache_path is not None and self.cache_path.exists():
            self._load_cache()

    def _load_cache(self) -> None:
        assert self.cache_path is not None
        with self.cache_path.open("r", encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    record = json.loads(line)
                    self._cache[record["key"]] = record["value"]
        logger.info(
            "loaded %d analyst cache entries from %s",
            len(self._cache), self.cache_path,
        )

    def _cache_put(self, key: str, value: dict) -> None:
        with self._lock:
            if key in self._cache:
                return
            self._cache[key] = value
            if self.cache_path is not None:
                with self.cache_path.open("a", encoding="utf-8") as handle:
                    handle.write(
                        json.dumps({"key": key, "value": value}, sort_keys=True)
                        + "\n"
                    )

    def _cache_get(self, key: str) -> Optional[dict]:
        with self._lock:
            return self._cache.get(key)

    def _ask(self, prompt: str) -> Optional[str]:
        assert self._client is not None
        try:
            return self._client.post("/analyze", {"prompt_text": prompt})[
                "response_text"
            ]
        except (TransportError, KeyError) as exc:
            logger.warning("analyst request failed, using fallback: %s", exc)
            return None

    def gen_relation_contrast(
        self,
        relation: RelationLabel,
        similar_relation: RelationLabel,
        example: Sample,
        similar_example: Sample,
    ) -> str:
        """One-sentence difference between ``relation`` and its most similar
        previously learned relation."""
        if example.relation != relation:
            raise ValueError("example must illustrate the first relation")
        if similar_example.relation != similar_relation:
            raise ValueError("similar_example must illustrate the second relation")
        key = _KEY_SEP.join(("contrast", relation, similar_relation))
        cached = self._cache_get(key)
        if cached is not None:
            return cached["difference"]
        if self.mode == MODE_REPLAY:
            raise AnalystReplayError(
                f"no cached contrast for ({relation!r}, {similar_relation!r}); "
                "rerun in remote or fallback mode to populate the cache"
            )
        value: Optional[str] = None
        if self.mode == MODE_REMOTE:
            prompt = render_contrast_prompt(
                relation, similar_relation, example, similar_example
            )
            response = self._ask(prompt)
            if response is not None:
                fields = extract_fields(response, ("difference",))
                if fields:
                    value = fields["difference"]
        if value is None:
            value = fallback_contrast(relation, similar_relation)
        self._cache_put(key, {"difference": value})
        return value

    def gen_error_analysis(
        self, sample: Sample, wrong: RelationLabel
    ) -> Tuple[str, str]:
        """(error reason, correct-answer analysis) for a wrong prediction."""
        if wrong == sample.relation:
            raise ValueError("error analysis requires a wrong prediction")
        key = _KEY_SEP.join(("error", sample.id))
        cached = self._cache_get(key)
        if cached is not None:
            return cached["error_reason"], cached["correct_answer_analysis"]
        if self.mode == MODE_REPLAY:
            raise AnalystReplayError(
                f"no cached error analysis for sample {sample.id!r}; rerun in "
                "remote or fallback mode to populate the cache"
            )
        pair: Optional[Tuple[str, str]] = None
        if self.mode == MODE_REMOTE:
            response = self._ask(render_error_prompt(sample, wrong))
            if response is not None:
                fields = extract_fields(
                    response, ("error_reason", "correct_answer_analysis")
                )
                if fields:
                    pair = (
                        fields["error_reason"],
                        fields["correct_answer_analysis"],
                    )
        if pair is None:
            pair = fallback_error_analysis(sample, wrong)
        self._cache_put(
            key,
            {"error_reason": pair[0], "correct_answer_analysis": pair[1]},
        )
        return pair
