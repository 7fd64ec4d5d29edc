"""Dialogue data model, JSONL persistence, and privacy filtering."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence


class CorpusFormatError(ValueError):
    pass


class ActLabel(enum.Enum):
    INQUIRE = "Inquire"
    MAKE_DIAGNOSIS = "MakeDiagnosis"
    PRESCRIBE_MEDICATIONS = "PrescribeMedications"
    STATE_REQUIRED_TEST = "StateRequiredTest"
    PROVIDE_DAILY_PRECAUTIONS = "ProvideDailyPrecautions"
    INFORM = "Inform"
    CHITCHAT = "Chitchat"

    @property
    def token(self) -> str:
        return f"[ACT_{self.name}]"

    @property
    def index(self) -> int:
        return ACTS.index(self)

    @classmethod
    def parse(cls, value: "str | ActLabel") -> "ActLabel":
        if isinstance(value, ActLabel):
            return value
        return cls(value)


ACTS: list[ActLabel] = list(ActLabel)
N_ACTS = len(ACTS)

ROLE_PATIENT = "patient"
ROLE_DOCTOR = "doctor"

PRIVACY_PLACEHOLDERS = (
    "The image is not available for privacy concerns",
    "The voice is not available for privacy concerns",
)


@dataclass
class Utterance:
    role: str
    tokens: list[str]
    entities: list[str] = field(default_factory=list)
    acts: list[ActLabel] = field(default_factory=list)

    def __post_init__(self):
        self.acts = sorted({ActLabel.parse(a) for a in self.acts}, key=lambda a: a.index)

    @property
    def act_set(self) -> frozenset:
        return frozenset(self.acts)

    def to_json(self) -> dict:
        return {
            "role": self.role,
            "tokens": list(self.tokens),
            "entities": list(self.entities),
            "acts": [a.value for a in self.acts],
        }


@dataclass
class Dialogue:
    id: str
    utterances: list[Utterance]

    def rounds(self) -> list[tuple[Utterance, Utterance | None]]:
        """(patient, doctor) pairs; a trailing patient utterance pairs with None."""
        out = []
        for i in range(0, len(self.utterances), 2):
            doctor = self.utterances[i + 1] if i + 1 < len(self.utterances) else None
            out.append((self.utterances[i], doctor))
        return out

    @property
    def n_doctor_turns(self) -> int:
        return len(self.utterances) // 2

    def validate(self, require_complete: bool = True) -> None:
        if require_complete and len(self.utterances) < 2:
            raise CorpusFormatError(f"dialogue {self.id}: needs at least one patient/doctor pair")
        for i, u in enumerate(self.utterances):
            expected = ROLE_PATIENT if i % 2 == 0 else ROLE_DOCTOR
            if u.role != expected:
                raise CorpusFormatError(
                    f"dialogue {self.id}: utterances[{i}].role is {u.role!r}, expected {expected!r}")
            if u.role == ROLE_DOCTOR and not u.acts:
                raise CorpusFormatError(f"dialogue {self.id}: utterances[{i}].acts is empty for a doctor turn")
            if u.role == ROLE_PATIENT and u.acts:
                raise CorpusFormatError(f"dialogue {self.id}: utterances[{i}].acts must be empty for a patient")

    def to_json(self) -> dict:
        return {"id": self.id, "utterances": [u.to_json() for u in self.utterances]}


def dialogue_from_json(obj: dict, lineno: int | None = None) -> Dialogue:
    where = f"line {lineno}" if lineno is not None else "record"
    if not isinstance(obj, dict) or "id" not in obj:
        raise CorpusFormatError(f"{where}: missing field 'id'")
    did = str(obj["id"])
    utts = obj.get("utterances")
    if not isinstance(utts, list):
        raise CorpusFormatError(f"dialogue {did}: field 'utterances' must be a list")
    out = []
    for i, u in enumerate(utts):
        for key in ("role", "tokens", "entities", "acts"):
            if key not in u:
                raise CorpusFormatError(f"dialogue {did}: utterances[{i}] missing field {key!r}")
        if not all(isinstance(t, str) for t in u["tokens"]):
            raise CorpusFormatError(f"dialogue {did}: utterances[{i}].tokens must be strings")
        try:
            acts = [ActLabel.parse(a) for a in u["acts"]]
        except ValueError as exc:
            raise CorpusFormatError(f"dialogue {did}: utterances[{i}].acts: {exc}") from None
        out.append(Utterance(u["role"], list(u["tokens"]), list(u["entities"]), acts))
    d = Dialogue(did, out)
    d.validate()
    return d


def load_corpus(path: str | Path) -> list[Dialogue]:
    corpus = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            corpus.append(dialogue_from_json(obj, lineno))
    return corpus


def save_corpus(corpus: Iterable[Dialogue], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in corpus:
            fh.write(json.dumps(d.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def filter_privacy(dialogue: Dialogue, placeholders: Sequence[str] = PRIVACY_PLACEHOLDERS) -> bool:
    """False when any utterance contains a privacy placeholder phrase (case-insensitive substring)."""
    needles = [" ".join(p.lower().split()) for p in placeholders]
    for u in dialogue.utterances:
        text = " ".join(t.lower() for t in u.tokens)
        if any(n in text for n in needles):
            return False
    return True
