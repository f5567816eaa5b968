"""Plain-text documents: experiment configs, MDPs, policies, and trace output.

All three input documents share one line-oriented syntax::

    # comment
    [section]
    key = value        (config-style sections)
    0.5 0.5            (array-style sections)

Numbers must be finite decimal literals; errors carry the file path and the
1-based line number.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .mdp_core import TabularIsaMdp
from .policy import Direct2, EmbeddedSoftmax, PolicySpec, TabularSoftmax


@dataclass
class Section:
    name: str
    line: int
    entries: list = field(default_factory=list)  # (line, text)


def lex_sections(text: str, path=None) -> list:
    sections = []
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ParseError(f"malformed section header {raw.strip()!r}", no, path)
            name = line[1:-1].strip()
            if any(s.name == name for s in sections):
                raise ParseError(f"duplicate section [{name}]", no, path)
            sections.append(Section(name, no))
        elif not sections:
            raise ParseError("content before the first [section] header", no, path)
        else:
            sections[-1].entries.append((no, line))
    return sections


def parse_decimal(token: str, line=None, path=None) -> float:
    try:
        d = Decimal(token)
    except InvalidOperation:
        raise ParseError(f"not a decimal number: {token!r}", line, path) from None
    if not d.is_finite():
        raise ParseError(f"non-finite number {token!r}", line, path)
    return float(d)


def parse_int(token: str, line=None, path=None) -> int:
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"not an integer: {token!r}", line, path) from None


def parse_bool(token: str, line=None, path=None) -> bool:
    low = token.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ParseError(f"not a boolean: {token!r}", line, path)


def _row(text, line, path):
    return [parse_decimal(tok, line, path) for tok in text.split()]


def key_values(section: Section, path=None) -> dict:
    """``key -> (value, line)`` for a config-style section."""
    out = {}
    for line, text in section.entries:
        if "=" not in text:
            raise ParseError(f"expected 'key = value' in [{section.name}]", line, path)
        key, value = (t.strip() for t in text.split("=", 1))
        if not key:
            raise ParseError("empty key", line, path)
        if key in out:
            raise ParseError(f"duplicate key {key!r} in [{section.name}]", line, path)
        out[key] = (value, line)
    return out


# ---------------------------------------------------------------------------
# MDP documents

MDP_SECTIONS = ("dimensions", "gamma", "mu0", "reward", "transition", "perturbation", "embeddings")


def loads_mdp(text: str, path=None) -> TabularIsaMdp:
    """Parse an MDP document.

    Sections: ``[dimensions]`` (``states``, ``actions``, optional ``obs_dim``),
    ``[gamma]``, ``[mu0]``, ``[reward]`` (one row per state), ``[transition]``
    (rows ``s a : p_0 ... p_{S-1}``), ``[perturbation]`` (rows ``s : b ...``),
    and optionally ``[embeddings]`` (one row per state).
    """
    sections = {s.name: s for s in lex_sections(text, path)}
    for name, sec in sections.items():
        if name not in MDP_SECTIONS:
            raise ParseError(f"unknown section [{name}]", sec.line, path)
    for name in MDP_SECTIONS[:-1]:
        if name not in sections:
            raise ParseError(f"missing section [{name}]", None, path)

    dims = key_values(sections["dimensions"], path)
    for key, (_, line) in dims.items():
        if key not in ("states", "actions", "obs_dim"):
            raise ParseError(f"unknown key {key!r} in [dimensions]", line, path)
    for key in ("states", "actions"):
        if key not in dims:
            raise ParseError(f"[dimensions] needs {key!r}", sections["dimensions"].line, path)
    S = parse_int(*dims["states"], path)
    A = parse_int(*dims["actions"], path)
    if S < 1 or A < 1:
        raise ParseError("dimensions must be positive", sections["dimensions"].line, path)

    def single_row(name, width):
        sec = sections[name]
        if len(sec.entries) != 1:
            raise ParseError(f"[{name}] must hold exactly one row", sec.line, path)
        line, txt = sec.entries[0]
        row = _row(txt, line, path)
        if len(row) != width:
            raise ParseError(f"[{name}] expects {width} numbers, got {len(row)}", line, path)
        return row

    gamma = single_row("gamma", 1)[0]
    mu0 = single_row("mu0", S)

    sec = sections["reward"]
    if len(sec.entries) != S:
        raise ParseError(f"[reward] needs {S} rows, got {len(sec.entries)}", sec.line, path)
    reward = []
    for line, txt in sec.entries:
        row = _row(txt, line, path)
        if len(row) != A:
            raise ParseError(f"reward row has {len(row)} entries, expected {A}", line, path)
        reward.append(row)

    transition = np.full((S, A, S), np.nan)
    for line, txt in sections["transition"].entries:
        head, sep, tail = txt.partition(":")
        idx = head.split()
        if not sep or len(idx) != 2:
            raise ParseError("transition rows look like 's a : p ...'", line, path)
        s, a = parse_int(idx[0], line, path), parse_int(idx[1], line, path)
        if not (0 <= s < S and 0 <= a < A):
            raise ParseError(f"transition index ({s}, {a}) out of range", line, path)
        if not np.isnan(transition[s, a, 0]):
            raise ParseError(f"duplicate transition row for ({s}, {a})", line, path)
        row = _row(tail, line, path)
        if len(row) != S:
            raise ParseError(f"transition row has {len(row)} entries, expected {S}", line, path)
        transition[s, a] = row
    missing = np.argwhere(np.isnan(transition[:, :, 0]))
    if missing.size:
        s, a = missing[0]
        raise ParseError(f"missing transition row for ({s}, {a})", sections["transition"].line, path)

    psets = [None] * S
    for line, txt in sections["perturbation"].entries:
        head, sep, tail = txt.partition(":")
        if not sep:
            raise ParseError("perturbation rows look like 's : b ...'", line, path)
        s = parse_int(head.strip(), line, path)
        if not 0 <= s < S:
            raise ParseError(f"state {s} out of range", line, path)
        if psets[s] is not None:
            raise ParseError(f"duplicate perturbation row for state {s}", line, path)
        psets[s] = tuple(parse_int(t, line, path) for t in tail.split())
    if any(p is None for p in psets):
        raise ParseError(f"missing perturbation row for state {psets.index(None)}",
                         sections["perturbation"].line, path)

    emb = None
    if "embeddings" in sections:
        sec = sections["embeddings"]
        emb = [_row(txt, line, path) for line, txt in sec.entries]
        widths = {len(r) for r in emb}
        if len(emb) != S or len(widths) != 1:
            raise ParseError(f"[embeddings] needs {S} rows of equal width", sec.line, path)
        if "obs_dim" in dims and parse_int(*dims["obs_dim"], path) != widths.pop():
            raise ParseError("obs_dim does not match the embedding width", dims["obs_dim"][1], path)

    try:
        return TabularIsaMdp(reward=reward, transition=transition, gamma=gamma, mu0=mu0,
                             perturb_sets=tuple(psets), embeddings=emb)
    except ValidationError as exc:
        raise ParseError(str(exc), None, path) from exc


def load_mdp(path) -> TabularIsaMdp:
    path = Path(path)
    return loads_mdp(path.read_text(), str(path))


def _num(x: float) -> str:
    # repr is the shortest string that round-trips exactly
    return repr(float(x))


def dumps_mdp(mdp: TabularIsaMdp) -> str:
    S, A = mdp.n_states, mdp.n_actions
    out = ["[dimensions]", f"states = {S}", f"actions = {A}"]
    if mdp.embeddings is not None:
        out.append(f"obs_dim = {mdp.obs_dim}")
    out += ["", "[gamma]", _num(mdp.gamma), "", "[mu0]", " ".join(map(_num, mdp.mu0)), "", "[reward]"]
    out += [" ".join(map(_num, row)) for row in mdp.reward]
    out += ["", "[transition]"]
    out += [f"{s} {a} : " + " ".join(map(_num, mdp.transition[s, a])) for s in range(S) for a in range(A)]
    out += ["", "[perturbation]"]
    out += [f"{s} : " + " ".join(map(str, m)) for s, m in enumerate(mdp.perturb_sets)]
    if mdp.embeddings is not None:
        out += ["", "[embeddings]"] + [" ".join(map(_num, row)) for row in mdp.embeddings]
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# policy documents


def dumps_policy(policy: PolicySpec) -> str:
    if isinstance(policy, Direct2):
        return f"[policy]\nvariant = direct2\nalpha = {_num(policy.alpha)}\nbeta = {_num(policy.beta)}\n"
    if isinstance(policy, TabularSoftmax):
        rows = "\n".join(" ".join(map(_num, r)) for r in policy.logits)
        return f"[policy]\nvariant = tabular_softmax\n\n[logits]\n{rows}\n"
    if isinstance(policy, EmbeddedSoftmax):
        rows = "\n".join(" ".join(map(_num, r)) for r in policy.weights)
        bias = " ".join(map(_num, policy.bias))
        return f"[policy]\nvariant = embedded_softmax\n\n[weights]\n{rows}\n\n[bias]\n{bias}\n"
    raise TypeError(f"unknown policy variant {type(policy).__name__}")


def loads_policy(text: str, path=None) -> PolicySpec:
    sections = {s.name: s for s in lex_sections(text, path)}
    if "policy" not in sections:
        raise ParseError("missing [policy] section", None, path)
    kv = key_values(sections["policy"], path)
    if "variant" not in kv:
        raise ParseError("[policy] needs 'variant'", sections["policy"].line, path)
    variant, vline = kv["variant"]
    allowed = {"direct2": ({"variant", "alpha", "beta"}, {"policy"}),
               "tabular_softmax": ({"variant"}, {"policy", "logits"}),
               "embedded_softmax": ({"variant"}, {"policy", "weights", "bias"})}
    if variant not in allowed:
        raise ParseError(f"unknown policy variant {variant!r}", vline, path)
    keys, secs = allowed[variant]
    for key, (_, line) in kv.items():
        if key not in keys:
            raise ParseError(f"unknown key {key!r} for variant {variant}", line, path)
    for name, sec in sections.items():
        if name not in secs:
            raise ParseError(f"unexpected section [{name}] for variant {variant}", sec.line, path)
    for name in secs:
        if name not in sections:
            raise ParseError(f"variant {variant} needs a [{name}] section", None, path)

    def matrix(name):
        return [_row(txt, line, path) for line, txt in sections[name].entries]

    try:
        if variant == "direct2":
            for key in ("alpha", "beta"):
                if key not in kv:
                    raise ParseError(f"direct2 needs {key!r}", sections["policy"].line, path)
            return Direct2(parse_decimal(*kv["alpha"], path), parse_decimal(*kv["beta"], path))
        if variant == "tabular_softmax":
            return TabularSoftmax(matrix("logits"))
        bias = matrix("bias")
        if len(bias) != 1:
            raise ParseError("[bias] must hold exactly one row", sections["bias"].line, path)
        return EmbeddedSoftmax(matrix("weights"), bias[0])
    except ParseError:
        raise
    except ValidationError as exc:
        raise ParseError(str(exc), None, path) from exc


def load_policy(path) -> PolicySpec:
    path = Path(path)
    return loads_policy(path.read_text(), str(path))


# ---------------------------------------------------------------------------
# traces

TRACE_COLUMNS = ("iter", "v_nat", "v_adv", "v_adv_exact", "grad_norm", "inner_metric")


def _csv_float(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.12g}"


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace.records:
            w.writerow([r.iter] + [_csv_float(getattr(r, c)) for c in TRACE_COLUMNS[1:]])


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_trace_jsonl(trace, path, include_wall_clock: bool = False) -> None:
    """One JSON object per iterate. Timing is left out unless requested so
    repeated runs produce identical files."""
    with open(path, "w") as fh:
        for r in trace.records:
            rec = r.comparable()
            if include_wall_clock:
                rec["wall_clock"] = r.wall_clock
            fh.write(json.dumps(_json_safe(rec), sort_keys=True) + "\n")


def read_trace_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
