from __future__ import annotations

import json
import random

import pytest

from tagforge import prompts, protocol
from tagforge.prompts import PromptError, render_prompt, template_slots
from tagforge.protocol import (APPROVED, CREATE_NEW_CATEGORY,
                               EXPAND_EXISTING_CATEGORY, IGNORE_AS_OUTLIERS,
                               CategoryProposal, ChangeProposal, ProtocolError,
                               ReviewDecision, parse_categories,
                               parse_change_proposal, parse_matched_rules,
                               parse_reviews, serialize_categories,
                               serialize_change_proposal, serialize_reviews)

# The appendix EXPAND example, used verbatim in a couple of tests.
GOOD_EXPAND = json.dumps({
    "change_type": "EXPAND_EXISTING_CATEGORY",
    "problem_summary": "The current 'Outdoor Gear' rule is too generic and "
                       "should explicitly include tactical accessories.",
    "suggested_change": {
        "rule_id_to_refine": "rule_a4368cef",
        "refined_description": "Outdoor & Tactical Gear: INCLUDES: Tents, "
                               "backpacks, sleeping bags, and tactical "
                               "accessories like gloves, belts, and pouches. "
                               "EXCLUDES: Specialized sporting equipment, "
                               "firearms, and knives.",
    },
})


def _architect_bindings(**overrides):
    bindings = {
        "parent_rule_description": "Firearm Accessories",
        "n_target_rules": "15",
        "context_prompt": "",
        "sample_text": "- [i1] scope for rifles",
    }
    bindings.update(overrides)
    return bindings


def test_architect_init_contains_verbatim_guidance():
    text = render_prompt(prompts.ARCHITECT_INIT, _architect_bindings())
    for phrase in ('"Optics"', '"Holsters"', '"Cleaning Kits"'):
        assert phrase in text
    assert '"Firearm Accessories"' in text
    assert "~15 mutually exclusive sub-categories" in text


def test_render_missing_slot_names_the_slot():
    bindings = _architect_bindings()
    del bindings["sample_text"]
    with pytest.raises(PromptError, match="sample_text"):
        render_prompt(prompts.ARCHITECT_INIT, bindings)


def test_render_is_deterministic():
    a = render_prompt(prompts.ARCHITECT_INIT, _architect_bindings())
    b = render_prompt(prompts.ARCHITECT_INIT, _architect_bindings())
    assert a == b


def test_render_unknown_template():
    with pytest.raises(PromptError, match="unknown template_id"):
        render_prompt("NoSuchTemplate", {})


def test_json_literals_in_templates_are_not_slots():
    slots = template_slots(prompts.ARCHITECT_INIT)
    assert slots == {"parent_rule_description", "n_target_rules",
                     "context_prompt", "sample_text"}
    assert template_slots(prompts.ANNOTATOR_ERROR_FEEDBACK) == {
        "len(ticket_cluster)", "existing_rules_text", "ticket_examples_text"}


def test_error_feedback_renders_paren_slot():
    text = render_prompt(prompts.ANNOTATOR_ERROR_FEEDBACK, {
        "len(ticket_cluster)": "7",
        "existing_rules_text": "- rule_00000000 :: A :: A: INCLUDES: a. EXCLUDES: b.",
        "ticket_examples_text": "- [i1] odd product",
    })
    assert "a cluster of 7 uncategorized products" in text
    assert "rule_a4368cef" in text  # the strict-format example survives


def test_no_unresolved_slots_after_render():
    text = render_prompt(prompts.ARCHITECT_REVIEW, {"proposals_text": "- x"})
    for slot in template_slots(prompts.ARCHITECT_REVIEW):
        assert "{" + slot + "}" not in text


def test_parse_categories_basic():
    raw = ('{"categories":[{"name":"Optics","description":"scopes etc",'
           '"includes":["scopes"],"excludes":["mounts"]}]}')
    cats = parse_categories(raw)
    assert len(cats) == 1
    assert cats[0].name == "Optics"
    assert cats[0].includes == ("scopes",)


def test_parse_categories_fenced_equals_bare():
    bare = ('{"categories":[{"name":"A","description":"d"}]}')
    fenced = f"Sure! Here you go:\n```json\n{bare}\n```\nHope that helps."
    assert parse_categories(fenced) == parse_categories(bare)


def test_parse_categories_empty_is_error():
    with pytest.raises(ProtocolError, match="empty category list"):
        parse_categories('{"categories": []}')


def test_parse_categories_missing_field():
    with pytest.raises(ProtocolError, match="description"):
        parse_categories('{"categories":[{"name":"A"}]}')


def test_parse_change_proposal_good_expand_example():
    proposal = parse_change_proposal(GOOD_EXPAND)
    assert proposal.change_type == EXPAND_EXISTING_CATEGORY
    assert proposal.rule_id_to_refine == "rule_a4368cef"
    assert proposal.refined_description.startswith("Outdoor & Tactical Gear:")


def test_parse_change_proposal_ignore_variant():
    raw = ('{"change_type":"IGNORE_AS_OUTLIERS","problem_summary":"x",'
           '"suggested_change":{"reason":"y"}}')
    proposal = parse_change_proposal(raw)
    assert proposal.change_type == IGNORE_AS_OUTLIERS
    assert proposal.reason == "y"
    assert proposal.new_rule_description is None


def test_expand_without_excludes_token_rejected():
    raw = json.dumps({
        "change_type": "EXPAND_EXISTING_CATEGORY",
        "problem_summary": "s",
        "suggested_change": {"rule_id_to_refine": "rule_a4368cef",
                             "refined_description": "Gear: INCLUDES: things."},
    })
    with pytest.raises(ProtocolError, match="EXCLUDES"):
        parse_change_proposal(raw)


def test_parse_change_proposal_unknown_type():
    raw = ('{"change_type":"DELETE_EVERYTHING","problem_summary":"x",'
           '"suggested_change":{"reason":"y"}}')
    with pytest.raises(ProtocolError):
        parse_change_proposal(raw)


def test_parse_reviews_duplicate_id_is_error():
    raw = json.dumps([
        {"proposal_id": "p1", "decision": "APPROVED", "reasoning": "r"},
        {"proposal_id": "p1", "decision": "REJECTED", "reasoning": "r"},
    ])
    with pytest.raises(ProtocolError, match="duplicate"):
        parse_reviews(raw)


def test_parse_matched_rules_requires_reason_when_empty():
    ids, reason = parse_matched_rules(
        '{"matched_rule_ids": ["rule_00000001"], "reason": null}')
    assert ids == ["rule_00000001"] and reason is None
    ids, reason = parse_matched_rules(
        '{"matched_rule_ids": [], "reason": "nothing fits"}')
    assert ids == [] and reason == "nothing fits"
    with pytest.raises(ProtocolError):
        parse_matched_rules('{"matched_rule_ids": [], "reason": ""}')


def _random_word(rng):
    return "".join(rng.choice("abcdeflayout") for _ in range(rng.randint(3, 9)))


def test_round_trip_properties_random_instances():
    rng = random.Random(2024)
    for _ in range(50):
        cats = [CategoryProposal(
            name=_random_word(rng),
            description=f"{_random_word(rng)}: INCLUDES: x. EXCLUDES: y.",
            includes=tuple(_random_word(rng) for _ in range(rng.randint(0, 3))),
            excludes=tuple(_random_word(rng) for _ in range(rng.randint(0, 2))),
        ) for _ in range(rng.randint(1, 5))]
        assert parse_categories(serialize_categories(cats)) == cats

        kind = rng.choice([CREATE_NEW_CATEGORY, EXPAND_EXISTING_CATEGORY,
                           IGNORE_AS_OUTLIERS])
        if kind == CREATE_NEW_CATEGORY:
            proposal = ChangeProposal(
                proposal_id="prop_00000000", change_type=kind,
                problem_summary=_random_word(rng),
                new_rule_description=f"{_random_word(rng)}: INCLUDES: a. EXCLUDES: b.")
        elif kind == EXPAND_EXISTING_CATEGORY:
            proposal = ChangeProposal(
                proposal_id="prop_00000000", change_type=kind,
                problem_summary=_random_word(rng),
                rule_id_to_refine="rule_0a0b0c0d",
                refined_description=f"{_random_word(rng)}: INCLUDES: a. EXCLUDES: b.")
        else:
            proposal = ChangeProposal(
                proposal_id="prop_00000000", change_type=kind,
                problem_summary=_random_word(rng), reason=_random_word(rng))
        parsed = parse_change_proposal(serialize_change_proposal(proposal),
                                       proposal_id="prop_00000000")
        assert parsed == proposal

        reviews = [ReviewDecision(proposal_id=f"p{j}",
                                  decision=rng.choice([APPROVED, "REJECTED"]),
                                  reasoning=_random_word(rng))
                   for j in range(rng.randint(1, 4))]
        assert parse_reviews(serialize_reviews(reviews)) == reviews


def test_extract_json_prefers_first_balanced_value():
    raw = 'noise {"a": {"b": [1, 2]}} trailing {"c": 3}'
    assert protocol.extract_json(raw) == {"a": {"b": [1, 2]}}
    with pytest.raises(ProtocolError):
        protocol.extract_json("no json here at all")
