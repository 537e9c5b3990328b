"""Machine-readable sectioning (grossing) protocol.

A protocol records how a prostatectomy specimen was cut: an apex and a
base region, each split into left/right (optionally ventral/dorsal)
compartments that are cut sagittally into numbered fragments, and a stack
of transverse central slices, each split into two or four fragments.

Document schema (UTF-8 JSON)::

    {
      "case_id": "S-001",
      "apex": {"offset_mm": 5.0, "split_frontal": false,
               "sections": {"L": {"count": 3, "ids": ["1L1", "1L2", "1L3"]},
                            "R": {"count": 3, "ids": ["2R1", "2R2", "2R3"]}}},
      "base": {...same structure as apex...},
      "central_count": 2,
      "central": [{"index": 1, "split_frontal": true,
                   "ids": ["3LV", "3LD", "4RV", "4RD"]}, ...]
    }
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any, Iterator

from .errors import ProtocolSyntaxError, SchemaError, ValidationError

ID_PATTERN = re.compile(
    r"^(?P<block>[A-Za-z0-9]+)(?P<side>[LR])(?P<frontal>[VD])?(?P<seq>[0-9]*)$")

SIDES = ("L", "R")
FRONTALS = ("V", "D")
# fixed traversal order of compartments within a region
COMPARTMENTS_LR = ("L", "R")
COMPARTMENTS_SPLIT = ("LV", "LD", "RV", "RD")


def compartments(split_frontal: bool) -> tuple[str, ...]:
    return COMPARTMENTS_SPLIT if split_frontal else COMPARTMENTS_LR


@dataclass(frozen=True, order=True)
class FragmentId:
    """Tissue fragment identifier ``<block><L|R>[<V|D>][<seq>]``."""

    block: str
    side: str
    frontal: str | None = None
    seq: int | None = None

    def __post_init__(self):
        if not self.block or not self.block.isalnum() or not self.block.isascii():
            raise ValidationError(f"invalid block identifier {self.block!r}")
        if self.side not in SIDES:
            raise ValidationError(f"invalid side {self.side!r}")
        if self.frontal is not None and self.frontal not in FRONTALS:
            raise ValidationError(f"invalid frontal code {self.frontal!r}")
        if self.seq is not None and (isinstance(self.seq, bool) or self.seq < 1):
            raise ValidationError(f"sequence number must be >= 1, got {self.seq!r}")

    @classmethod
    def parse(cls, text: str) -> FragmentId:
        m = ID_PATTERN.match(text) if isinstance(text, str) else None
        if m is None:
            raise ValidationError(f"fragment id {text!r} does not match <block><L|R>[V|D][seq]")
        seq = m["seq"]
        if seq.startswith("0"):
            raise ValidationError(f"fragment id {text!r}: sequence must be a positive integer "
                                  "without leading zeros")
        return cls(m["block"], m["side"], m["frontal"], int(seq) if seq else None)

    @property
    def compartment(self) -> str:
        return self.side + (self.frontal or "")

    def __str__(self) -> str:
        return f"{self.block}{self.compartment}{'' if self.seq is None else self.seq}"


@dataclass(frozen=True)
class Region:
    """Where a fragment lives: ``apex``, ``base`` or ``central`` slice ``index``."""

    kind: str
    index: int | None = None

    def __str__(self) -> str:
        return self.kind if self.index is None else f"{self.kind}[{self.index}]"


APEX = Region("apex")
BASE = Region("base")


@dataclass(frozen=True)
class CompartmentSpec:
    count: int
    ids: tuple[FragmentId, ...]


@dataclass(frozen=True)
class ApexBaseSpec:
    offset_mm: float
    split_frontal: bool
    sections: dict[str, CompartmentSpec]

    def __hash__(self):
        return hash((self.offset_mm, self.split_frontal, tuple(sorted(self.sections.items()))))


@dataclass(frozen=True)
class CentralSliceSpec:
    index: int
    split_frontal: bool
    ids: tuple[FragmentId, ...]


@dataclass(frozen=True)
class SectioningProtocol:
    case_id: str
    apex: ApexBaseSpec
    base: ApexBaseSpec
    central_count: int
    central: tuple[CentralSliceSpec, ...]

    def fragment_ids(self) -> list[tuple[FragmentId, Region]]:
        return fragment_ids(self)


# ---------------------------------------------------------------------------
# parsing


def _expect_keys(obj: Any, required: set[str], path: str) -> None:
    if not isinstance(obj, dict):
        raise SchemaError(f"expected an object, got {type(obj).__name__}", path)
    missing = required - obj.keys()
    if missing:
        raise SchemaError(f"missing key(s) {sorted(missing)}", path)
    extra = obj.keys() - required
    if extra:
        raise SchemaError(f"unknown key(s) {sorted(extra)}", path)


def _expect(value: Any, kind: type | tuple, path: str) -> Any:
    # bool is an int subclass; keep them apart
    if isinstance(value, bool) and kind is not bool:
        raise SchemaError(f"expected {getattr(kind, '__name__', kind)}, got bool", path)
    if not isinstance(value, kind):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise SchemaError(f"expected {name}, got {type(value).__name__}", path)
    return value


def _parse_id(text: Any, path: str) -> FragmentId:
    _expect(text, str, path)
    try:
        return FragmentId.parse(text)
    except ValidationError as exc:
        raise ValidationError(str(exc), path) from None


def _parse_apex_base(obj: Any, path: str) -> ApexBaseSpec:
    _expect_keys(obj, {"offset_mm", "split_frontal", "sections"}, path)
    offset = float(_expect(obj["offset_mm"], (int, float), f"{path}.offset_mm"))
    if not offset > 0:
        raise ValidationError(f"offset must be positive, got {offset}", f"{path}.offset_mm")
    split = _expect(obj["split_frontal"], bool, f"{path}.split_frontal")
    sections = _expect(obj["sections"], dict, f"{path}.sections")
    expected = set(compartments(split))
    if set(sections) != expected:
        raise SchemaError(f"compartments must be exactly {sorted(expected)} "
                          f"(split_frontal={split}), got {sorted(sections)}", f"{path}.sections")
    parsed = {}
    for key in compartments(split):
        cpath = f"{path}.sections.{key}"
        entry = sections[key]
        _expect_keys(entry, {"count", "ids"}, cpath)
        count = _expect(entry["count"], int, f"{cpath}.count")
        ids_raw = _expect(entry["ids"], list, f"{cpath}.ids")
        if count < 1:
            raise ValidationError(f"count must be >= 1, got {count}", f"{cpath}.count")
        if len(ids_raw) != count:
            raise ValidationError(f"count is {count} but {len(ids_raw)} ids listed", f"{cpath}.ids")
        ids = []
        for i, raw in enumerate(ids_raw):
            ipath = f"{cpath}.ids[{i}]"
            fid = _parse_id(raw, ipath)
            if fid.compartment != key:
                raise ValidationError(f"id {raw!r} is in compartment {fid.compartment}, "
                                      f"listed under {key}", ipath)
            if fid.seq != i + 1:
                raise ValidationError(f"id {raw!r} must carry sequence number {i + 1}", ipath)
            ids.append(fid)
        parsed[key] = CompartmentSpec(count, tuple(ids))
    return ApexBaseSpec(offset, split, parsed)


def _parse_central(obj: Any, path: str) -> CentralSliceSpec:
    _expect_keys(obj, {"index", "split_frontal", "ids"}, path)
    index = _expect(obj["index"], int, f"{path}.index")
    split = _expect(obj["split_frontal"], bool, f"{path}.split_frontal")
    ids_raw = _expect(obj["ids"], list, f"{path}.ids")
    expected = compartments(split)
    if len(ids_raw) != len(expected):
        raise ValidationError(f"slice with split_frontal={split} needs {len(expected)} ids, "
                              f"got {len(ids_raw)}", f"{path}.ids")
    ids, seen = [], set()
    for i, raw in enumerate(ids_raw):
        ipath = f"{path}.ids[{i}]"
        fid = _parse_id(raw, ipath)
        if fid.seq is not None:
            raise ValidationError(f"central fragment id {raw!r} must not carry a sequence number",
                                  ipath)
        if fid.compartment not in expected:
            raise ValidationError(f"compartment {fid.compartment} not allowed here "
                                  f"(expected one of {list(expected)})", ipath)
        if fid.compartment in seen:
            raise ValidationError(f"compartment {fid.compartment} listed twice", ipath)
        seen.add(fid.compartment)
        ids.append(fid)
    return CentralSliceSpec(index, split, tuple(ids))


def protocol_from_dict(doc: Any) -> SectioningProtocol:
    """Validate a decoded JSON document and build a :class:`SectioningProtocol`."""
    _expect_keys(doc, {"case_id", "apex", "base", "central_count", "central"}, "")
    case_id = _expect(doc["case_id"], str, "case_id")
    if not case_id.strip():
        raise ValidationError("case_id must be non-empty", "case_id")
    apex = _parse_apex_base(doc["apex"], "apex")
    base = _parse_apex_base(doc["base"], "base")
    central_count = _expect(doc["central_count"], int, "central_count")
    if central_count < 1:
        raise ValidationError(f"central_count must be >= 1, got {central_count}", "central_count")
    central_raw = _expect(doc["central"], list, "central")
    if len(central_raw) != central_count:
        raise ValidationError(f"central_count is {central_count} but {len(central_raw)} "
                              "slices listed", "central")
    central = tuple(_parse_central(c, f"central[{i}]") for i, c in enumerate(central_raw))
    for i, spec in enumerate(central):
        if spec.index != i + 1:
            raise ValidationError(f"slice indices must be 1..{central_count} in order, "
                                  f"found {spec.index} at position {i}", f"central[{i}].index")
    protocol = SectioningProtocol(case_id, apex, base, central_count, central)

    seen: dict[FragmentId, str] = {}
    for fid, path in _ids_with_paths(protocol):
        if fid in seen:
            raise ValidationError(f"duplicate fragment id {fid} (first seen at {seen[fid]})", path)
        seen[fid] = path
    return protocol


def _ids_with_paths(p: SectioningProtocol) -> Iterator[tuple[FragmentId, str]]:
    for name, spec in (("apex", p.apex), ("base", p.base)):
        for key, comp in spec.sections.items():
            for i, fid in enumerate(comp.ids):
                yield fid, f"{name}.sections.{key}.ids[{i}]"
    for i, sl in enumerate(p.central):
        for j, fid in enumerate(sl.ids):
            yield fid, f"central[{i}].ids[{j}]"


def parse_protocol(text: str | bytes) -> SectioningProtocol:
    """Parse and fully validate a protocol document.

    Raises
    ------
    ProtocolSyntaxError
        The text is not valid JSON.
    SchemaError
        Missing/unknown keys or wrong value types.
    ValidationError
        Duplicate ids, count mismatches, bad id grammar.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolSyntaxError(f"not UTF-8: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolSyntaxError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return protocol_from_dict(doc)


# ---------------------------------------------------------------------------
# serialization


def protocol_to_dict(p: SectioningProtocol) -> dict:
    def region(spec: ApexBaseSpec) -> dict:
        return {
            "offset_mm": spec.offset_mm,
            "split_frontal": spec.split_frontal,
            "sections": {k: {"count": c.count, "ids": [str(i) for i in c.ids]}
                         for k, c in spec.sections.items()},
        }

    return {
        "case_id": p.case_id,
        "apex": region(p.apex),
        "base": region(p.base),
        "central_count": p.central_count,
        "central": [{"index": c.index, "split_frontal": c.split_frontal,
                     "ids": [str(i) for i in c.ids]} for c in p.central],
    }


def serialize_protocol(p: SectioningProtocol) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(protocol_to_dict(p), sort_keys=True, indent=2) + "\n"


def fragment_ids(p: SectioningProtocol) -> list[tuple[FragmentId, Region]]:
    """All fragment ids in protocol order: apex, central slices by index, base.

    Within apex/base the compartments run L, LV, LD, R, RV, RD (whichever
    exist) and each compartment by sequence number; within a central slice
    they run LV, LD, RV, RD (or L, R).
    """
    out: list[tuple[FragmentId, Region]] = []

    def apex_base(spec: ApexBaseSpec, region: Region):
        for key in ("L", "LV", "LD", "R", "RV", "RD"):
            if key in spec.sections:
                out.extend((fid, region) for fid in
                           sorted(spec.sections[key].ids, key=lambda f: f.seq))

    apex_base(p.apex, APEX)
    for sl in sorted(p.central, key=lambda s: s.index):
        order = compartments(sl.split_frontal)
        for fid in sorted(sl.ids, key=lambda f: order.index(f.compartment)):
            out.append((fid, Region("central", sl.index)))
    apex_base(p.base, BASE)
    return out


def make_protocol(case_id: str, *, apex_counts: dict[str, int], base_counts: dict[str, int],
                  central_split: list[bool], apex_offset: float = 5.0,
                  base_offset: float = 5.0) -> SectioningProtocol:
    """Build a valid protocol with automatically numbered block ids.

    Every compartment of apex/base and every central slice side gets its own
    block number, assigned in traversal order starting at 1.
    """
    block = 0

    def next_block() -> str:
        nonlocal block
        block += 1
        return str(block)

    def region(counts: dict[str, int], offset: float) -> dict:
        split = len(counts) == 4
        sections = {}
        for key in compartments(split):
            b = next_block()
            sections[key] = {"count": counts[key],
                             "ids": [f"{b}{key}{s}" for s in range(1, counts[key] + 1)]}
        return {"offset_mm": offset, "split_frontal": split, "sections": sections}

    apex = region(apex_counts, apex_offset)
    central = []
    for i, split in enumerate(central_split, start=1):
        ids = []
        for side in SIDES:
            b = next_block()
            ids.extend(f"{b}{side}{f}" for f in (FRONTALS if split else ("",)))
        central.append({"index": i, "split_frontal": split, "ids": ids})
    base = region(base_counts, base_offset)
    return protocol_from_dict({"case_id": case_id, "apex": apex, "base": base,
                               "central_count": len(central), "central": central})
