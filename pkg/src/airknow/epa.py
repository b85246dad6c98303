"""External prior arbitration: expert verdicts over triplets.

Two arbiter families share one contract. The simulated oracle flips the
hidden corruption tag with configurable per-class accuracy, calibrated to
published expert accuracy figures. The remote arbiter renders a three-step
prompt chain, sends one JSON request per triplet over a pluggable transport
and parses the structured verdict; tests drive it through recorded
transcripts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ParseError
from .rng import RngState
from . import world as _world

CLEAN = "clean"
NOISY = "noisy"

DIAG_NONE = "none"
DIAG_MOD = "mismatched_modification_text"
DIAG_REF = "mismatched_reference_image"
DIAG_TAR = "mismatched_target_image"
DIAGNOSES = (DIAG_MOD, DIAG_REF, DIAG_TAR)

_CORRUPTION_TO_DIAG = {
    _world.REF_SHUFFLE: DIAG_REF,
    _world.MOD_SHUFFLE: DIAG_MOD,
    _world.TAR_SHUFFLE: DIAG_TAR,
}

ANCHOR_SCHEMA = "airknow-anchor-v1"

STEP1 = "Step 1: Deconstruct Inputs"
STEP2 = "Step 2: Compare & Reason"
STEP3 = "Step 3: Judge & Conclude"


@dataclass
class Verdict:
    label: str
    diagnosis: str = DIAG_NONE
    rationale: str = ""

    def __post_init__(self):
        if self.label not in (CLEAN, NOISY):
            raise InputError(f"unknown verdict label {self.label!r}")
        if self.label == CLEAN and self.diagnosis != DIAG_NONE:
            raise InputError("clean verdict cannot carry a diagnosis")
        if self.label == NOISY and self.diagnosis not in DIAGNOSES:
            raise InputError(f"noisy verdict needs a diagnosis, got {self.diagnosis!r}")

    @property
    def is_clean(self) -> bool:
        return self.label == CLEAN


@dataclass
class ArbiterModel:
    """Simulated expert with independent per-class accuracies."""

    kind: str = "oracle"
    p_clean_correct: float = 0.8516
    p_noisy_correct: float = 0.8516
    stream: int = 0

    def __post_init__(self):
        if self.kind not in ("oracle", "remote"):
            raise ConfigError(f"unknown arbiter kind {self.kind!r}")
        for name in ("p_clean_correct", "p_noisy_correct"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} {p} outside [0, 1]")


@dataclass
class AnchorRecord:
    id: str
    verdict: Verdict


def oracle_arbitrate(triplet, model: ArbiterModel, rng: RngState) -> Verdict:
    """Verdict from the hidden corruption tag, flipped with per-class error.

    Only the tag is read, never the embedding values. Correct noisy verdicts
    carry the true cause; flips to noisy draw a cause uniformly.
    """
    if model.kind != "oracle":
        raise InputError("oracle_arbitrate needs an oracle arbiter")
    g = rng.generator()
    truly_clean = triplet.oracle_corruption == _world.CORRUPTION_NONE
    p_correct = model.p_clean_correct if truly_clean else model.p_noisy_correct
    correct = g.random() < p_correct
    says_clean = truly_clean if correct else not truly_clean
    if says_clean:
        return Verdict(CLEAN, DIAG_NONE, "simulated oracle verdict")
    if truly_clean:
        diagnosis = DIAGNOSES[g.integers(0, len(DIAGNOSES))]
    else:
        diagnosis = _CORRUPTION_TO_DIAG[triplet.oracle_corruption]
    return Verdict(NOISY, diagnosis, "simulated oracle verdict")


# ---------------------------------------------------------------------------
# Prompt chain for a remote expert
# ---------------------------------------------------------------------------

@dataclass
class TripletDescription:
    """Textual account of each triplet element, for a text-only expert."""

    reference: str
    modification: str
    target: str


@dataclass
class PromptBundle:
    system: str
    user: str
    response_schema: str


_SYSTEM_TEXT = (
    "You are a meticulous auditor of composed-retrieval training triplets. "
    "Each triplet holds a reference item, a modification instruction and a "
    "target item. Decide whether the three genuinely correspond. Respond "
    "with JSON only, matching the schema you are given."
)

_RESPONSE_SCHEMA = json.dumps({
    "analysis": {
        "reference_facts": "string",
        "target_facts": "string",
        "modification_intent": "string",
        "inferred_change": "string",
        "reasoning": "string",
    },
    "final_judgement": {
        "label": "Clean | Noisy",
        "type": ("None | Mismatched Modification Text | "
                 "Mismatched Reference Image | Mismatched Target Image"),
        "summary": "string",
    },
}, indent=2)

_STEP1_BODY = """\
{step1}
Describe each input separately and without cross-reference:
(a) the reference item {ref}; (b) the target item {tar};
(c) the intent of the modification instruction {mod}.
Record these as independent factual descriptions before any comparison."""

_STEP2_BODY = """\
{step2}
Ignoring the instruction, state the actual change from reference to target.
Then cross-validate that inferred change against the given instruction.
Tolerate minor unmentioned discrepancies (pose, framing, small background
shifts): if the instruction's core change did occur, treat the triplet as
matching. If they do not match, diagnose the cause as exactly one of:
Mismatched Modification Text (instruction unrelated to the actual change),
Mismatched Reference Image (instruction and target coherent, reference
unrelated), or Mismatched Target Image (reference plus instruction point
elsewhere)."""

_STEP3_BODY = """\
{step3}
Emit the response JSON. Set final_judgement.label to "Clean" or "Noisy";
when Noisy, set final_judgement.type to the diagnosed cause, else "None"."""

PROMPT_VARIANTS = ("full", "no_step1", "no_step2", "single")


def build_prompt(desc: TripletDescription, variant: str = "full") -> PromptBundle:
    """Render the verification prompt; descriptions are JSON-escaped.

    The default template walks the three steps in order; the alternates drop
    deconstruction, reasoning, or both (kept only as templates, never
    benchmarked here).
    """
    if variant not in PROMPT_VARIANTS:
        raise InputError(f"unknown prompt variant {variant!r}")
    for name in ("reference", "modification", "target"):
        if not getattr(desc, name).strip():
            raise InputError(f"empty triplet description field {name!r}")
    ref = json.dumps(desc.reference)
    mod = json.dumps(desc.modification)
    tar = json.dumps(desc.target)
    sections = []
    if variant in ("full", "no_step2"):
        sections.append(_STEP1_BODY.format(step1=STEP1, ref=ref, tar=tar, mod=mod))
    if variant in ("full", "no_step1"):
        sections.append(_STEP2_BODY.format(step2=STEP2))
    if variant == "single":
        sections.append(
            "Decide directly whether this triplet corresponds:\n"
            f"reference {ref}; modification {mod}; target {tar}."
        )
    sections.append(_STEP3_BODY.format(step3=STEP3))
    user = "\n\n".join(sections) + "\n\nResponse schema:\n" + _RESPONSE_SCHEMA
    if variant != "single" and variant != "full":
        # alternates still need the raw inputs somewhere in the text
        user = (f"Inputs: reference {ref}; modification {mod}; target {tar}.\n\n"
                + user)
    bundle = PromptBundle(_SYSTEM_TEXT, user, _RESPONSE_SCHEMA)
    if variant == "full":
        pos = [bundle.user.find(s) for s in (STEP1, STEP2, STEP3)]
        if min(pos) < 0 or pos != sorted(pos):
            raise InputError("full prompt must contain the three steps in order")
    return bundle


def _normalize_type(text: str) -> str:
    lowered = "".join(ch for ch in text.lower() if ch.isalpha() or ch == " ")
    if "modification" in lowered or "instruction" in lowered:
        return DIAG_MOD
    if "reference" in lowered:
        return DIAG_REF
    if "target" in lowered:
        return DIAG_TAR
    raise ParseError(f"unknown mismatch type {text!r}")


def verdict_from_response(response: dict) -> Verdict:
    """Interpret a parsed response object."""
    if not isinstance(response, dict) or "final_judgement" not in response:
        raise ParseError("response has no final_judgement section")
    final = response["final_judgement"]
    if not isinstance(final, dict) or "label" not in final:
        raise ParseError("final_judgement has no label")
    label = str(final["label"]).strip().lower()
    rationale = str(final.get("summary", ""))
    if label == "clean":
        return Verdict(CLEAN, DIAG_NONE, rationale)
    if label == "noisy":
        raw = final.get("type")
        if raw is None or not str(raw).strip():
            raise ParseError("noisy judgement carries no mismatch type")
        return Verdict(NOISY, _normalize_type(str(raw)), rationale)
    raise ParseError(f"unknown verdict label {final['label']!r}")


def parse_verdict(response_text: str) -> Verdict:
    """Parse a raw response document (optionally fenced JSON)."""
    text = response_text.strip()
    if not text:
        raise ParseError("empty response")
    if text.startswith("```"):
        text = text.strip("`")
        if text.startswith("json"):
            text = text[4:]
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"response is not valid JSON ({exc})") from exc
    return verdict_from_response(obj)


# ---------------------------------------------------------------------------
# Remote arbiter plumbing
# ---------------------------------------------------------------------------

def request_payload(bundle: PromptBundle) -> dict:
    """Wire format of one arbitration request."""
    return {"system": bundle.system, "user": bundle.user,
            "response_schema": bundle.response_schema}


class TranscriptReplayTransport:
    """Replays recorded request -> response pairs; errors on unseen requests."""

    def __init__(self, exchanges):
        self._by_key = {self._key(e["request"]): e["response"] for e in exchanges}

    @staticmethod
    def _key(request: dict) -> str:
        return json.dumps(request, sort_keys=True)

    def __call__(self, request: dict) -> dict:
        key = self._key(request)
        if key not in self._by_key:
            raise InputError("no recorded response for this request")
        return self._by_key[key]


def http_transport(url, timeout=30.0):
    """One JSON POST per request; kept behind config flags, never in tests."""
    import urllib.request

    def send(request: dict) -> dict:
        body = json.dumps(request).encode("utf-8")
        req = urllib.request.Request(
            url, data=body, headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    return send


@dataclass
class RemoteArbiter:
    """Arbiter that defers to an external expert through a transport callable."""

    transport: object
    descriptions: dict          # triplet id -> TripletDescription
    variant: str = "full"

    def arbitrate(self, triplet, rng: RngState) -> Verdict:
        if triplet.id not in self.descriptions:
            raise InputError(f"no description for triplet {triplet.id!r}")
        bundle = build_prompt(self.descriptions[triplet.id], self.variant)
        response = self.transport(request_payload(bundle))
        return verdict_from_response(response)


# ---------------------------------------------------------------------------
# Anchor set
# ---------------------------------------------------------------------------

def build_anchor_set(dataset, arbiter, m: int, rng: RngState) -> list:
    """Arbitrate m triplets drawn uniformly without replacement, in draw order."""
    n = len(dataset)
    if m > n:
        raise ConfigError(f"anchor size {m} exceeds dataset size {n}")
    if m < 0:
        raise ConfigError(f"anchor size {m} < 0")
    if m == 0:
        return []
    g = rng.generator()
    chosen = g.choice(n, size=m, replace=False)
    records = []
    for k, idx in enumerate(chosen):
        triplet = dataset.triplets[int(idx)]
        sub = rng.derive(1, k)
        if isinstance(arbiter, ArbiterModel):
            verdict = oracle_arbitrate(triplet, arbiter, sub)
        elif hasattr(arbiter, "arbitrate"):
            verdict = arbiter.arbitrate(triplet, sub)
        else:
            raise InputError("arbiter must be an ArbiterModel or expose arbitrate()")
        records.append(AnchorRecord(triplet.id, verdict))
    return records


def write_anchor_set(records, path, arbiter_info=None):
    """JSON Lines: header record then one verdict per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = {"schema": ANCHOR_SCHEMA, "arbiter": arbiter_info or {}}
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps({
                "id": rec.id,
                "label": rec.verdict.label,
                "diagnosis": rec.verdict.diagnosis,
                "rationale": rec.verdict.rationale,
            }) + "\n")


def read_anchor_set(path):
    """Returns (records, arbiter_info)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line 1: invalid JSON ({exc})") from exc
    if header.get("schema") != ANCHOR_SCHEMA:
        raise ParseError(f"{path}: line 1: expected schema {ANCHOR_SCHEMA!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
        for key in ("id", "label", "diagnosis"):
            if key not in rec:
                raise ParseError(f"{path}: line {lineno}: missing key {key!r}")
        records.append(AnchorRecord(
            str(rec["id"]),
            Verdict(rec["label"], rec["diagnosis"], rec.get("rationale", "")),
        ))
    return records, header.get("arbiter", {})
