"""Closed whitespace vocabulary with role, control, and act tokens."""
from __future__ import annotations

from typing import Iterable, Sequence

from .schema import ACTS, ROLE_DOCTOR, Dialogue

PAD, UNK, BOS, EOS, P_TOK, D_TOK = "[PAD]", "[UNK]", "[BOS]", "[EOS]", "[P]", "[D]"
SPECIALS = [PAD, UNK, BOS, EOS, P_TOK, D_TOK] + [a.token for a in ACTS]


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.unk_id
        return [self.stoi.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            tok = self.itos[int(i)]
            if strip and tok in (PAD, BOS):
                continue
            if strip and tok == EOS:
                break
            out.append(tok)
        return out

    def act_id(self, act) -> int:
        return self.stoi[act.token]

    @classmethod
    def build(cls, corpus: Iterable[Dialogue], entity_names: Iterable[str] = ()) -> "Vocab":
        """Vocabulary over all corpus tokens plus every KG entity-name token, in first-seen order."""
        v = cls()
        for d in corpus:
            for u in d.utterances:
                for t in u.tokens:
                    v.add(t)
        for name in entity_names:
            for t in name.split():
                v.add(t)
        return v


def role_tagged(utterances) -> list[str]:
    """Concatenate utterances, each prefixed with its role token."""
    out: list[str] = []
    for u in utterances:
        out.append(D_TOK if u.role == ROLE_DOCTOR else P_TOK)
        out.extend(u.tokens)
    return out
