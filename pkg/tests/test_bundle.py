"""Bundle canonical form, integrity verification, and plan-file round trips."""

from __future__ import annotations

import hashlib
import json

import pytest

from orchkit.bundle import (
    FORMAT_VERSION,
    RuntimeDefaults,
    _render,
    canonical_json,
    load_plan,
    pack,
    plan_from_dict,
    plan_to_dict,
    repack,
    save_plan,
    unpack,
)
from orchkit.errors import (
    ChecksumMismatchError,
    MalformedBundleError,
    PlanInvalidError,
    UnrefinedPromptsError,
    VersionIncompatibleError,
)
from orchkit.model import FeatureSet, SyntheticCase

from conftest import golden_plan, refined_plan


def test_pack_is_byte_deterministic():
    assert pack(refined_plan()) == pack(refined_plan())


def test_pack_unpack_round_trips_plan_content():
    plan = refined_plan()
    bundle = unpack(pack(plan))
    assert bundle.to_plan() == plan
    assert bundle.format_version == FORMAT_VERSION
    assert bundle.runtime() == RuntimeDefaults()


def test_unpack_pack_is_identity_on_bytes():
    data = pack(refined_plan(), RuntimeDefaults(rounds=3, threshold=0.9))
    assert repack(unpack(data)) == data


def test_pack_rejects_invalid_plan():
    plan = golden_plan()
    sets = dict(plan.synthetic_sets)
    sets["ghost"] = (SyntheticCase("ghost", "text", FeatureSet({"x": "y"})),)
    with pytest.raises(PlanInvalidError, match="ghost"):
        pack(plan.with_synthetic_sets(sets))


def test_pack_rejects_unrefined_prompts():
    with pytest.raises(UnrefinedPromptsError):
        pack(golden_plan())  # drafts only


def test_pack_allow_failed_gate():
    plan = refined_plan()
    failed = plan.prompts[0].report
    prompts = (plan.prompts[0].failed(failed), *plan.prompts[1:])
    half_failed = plan.with_prompts(prompts)
    with pytest.raises(UnrefinedPromptsError, match="allow_failed"):
        pack(half_failed)
    bundle = unpack(pack(half_failed, allow_failed=True))
    assert bundle.allow_failed is True
    assert bundle.to_plan().prompts[0].status == "failed"


def test_single_byte_flip_detected_sampled():
    data = bytearray(pack(refined_plan()))
    for pos in range(0, len(data), 97):  # sampled; acceptance covers every byte
        mutated = bytearray(data)
        mutated[pos] ^= 0x01
        with pytest.raises((ChecksumMismatchError, MalformedBundleError)):
            unpack(bytes(mutated))


def test_version_gate():
    bundle = unpack(pack(refined_plan()))
    sections = json.loads(json.dumps(dict(bundle.sections)))
    sections["meta"]["format_version"] = "2.0.0"
    with pytest.raises(VersionIncompatibleError, match="2.0.0"):
        unpack(_render(sections))
    sections["meta"]["format_version"] = FORMAT_VERSION.replace("0", "9", 1)
    # Same major: minor/patch drift is tolerated.
    with pytest.raises(VersionIncompatibleError):
        unpack(_render({**sections, "meta": {**sections["meta"],
                                             "format_version": "2.1.3"}}))


def test_section_hash_mismatch_detected():
    data = pack(refined_plan()).decode("utf-8")
    body, trailer = data.rsplit("#sha256:", 1)
    document = json.loads(body)
    document["sections"]["runtime"]["rounds"] = 99  # stale integrity map
    new_body = canonical_json(document) + "\n"
    new_trailer = "#sha256:" + hashlib.sha256(new_body.encode()).hexdigest() + "\n"
    with pytest.raises(ChecksumMismatchError, match="runtime"):
        unpack((new_body + new_trailer).encode("utf-8"))


@pytest.mark.parametrize("raw", [
    b"\xff\xfenot utf8 at all \xff",
    b"{\"sections\": {}}\n",                      # no trailer
    b"not json\n#sha256:" + hashlib.sha256(b"not json\n").hexdigest().encode() + b"\n",
])
def test_malformed_bundles_rejected(raw):
    with pytest.raises(MalformedBundleError):
        unpack(raw)


def test_bundle_logic_digest_matches_reparse():
    from orchkit.ruledsl import pretty

    plan = refined_plan()
    bundle = unpack(pack(plan))
    logic = bundle.sections["logic"]
    assert logic["source"] == plan.logic_source  # verbatim
    reparsed = bundle.to_plan().parsed_logic()
    assert hashlib.sha256(pretty(reparsed).encode()).hexdigest() == \
        logic["parsed_digest"]
    assert reparsed.rules == plan.parsed_logic().rules


def test_guideline_body_inclusion_is_opt_in():
    plan = refined_plan()
    lean = unpack(pack(plan))
    assert "guideline_body" not in lean.sections["meta"]
    fat = unpack(pack(plan, guideline_body="full guideline text"))
    assert fat.sections["meta"]["guideline_body"] == "full guideline text"


def test_created_at_defaults_to_epoch_and_is_overridable():
    plan = refined_plan()
    assert unpack(pack(plan)).created_at == "1970-01-01T00:00:00Z"
    stamped = pack(plan, created_at="2025-06-01T12:00:00Z")
    assert unpack(stamped).created_at == "2025-06-01T12:00:00Z"
    assert stamped != pack(plan)


def test_plan_dict_round_trip():
    plan = refined_plan()
    assert plan_from_dict(json.loads(json.dumps(plan_to_dict(plan)))) == plan


def test_plan_file_round_trip(tmp_path):
    plan = refined_plan()
    path = tmp_path / "plan.json"
    save_plan(plan, path)
    assert load_plan(path) == plan
    with pytest.raises(ValueError, match="plan file"):
        load_plan(tmp_path / "missing.json")
    (tmp_path / "junk.json").write_text("{}", encoding="utf-8")
    with pytest.raises(ValueError, match="not a plan file"):
        load_plan(tmp_path / "junk.json")
