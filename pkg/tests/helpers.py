"""Shared test utilities: tiny worlds and relu-kink avoidance for gradient checks."""
import numpy as np

from skillrec.catalog import Catalog, LoggedInteraction, Skill, Utterance


def push_off_kinks(params, pre_acts_fn, eps=1e-3, delta=0.02, max_rounds=20):
    """Nudge bias units until no relu pre-activation sits within eps of zero.

    Central differences step across the kink otherwise, making the numeric
    gradient disagree with the (one-sided) analytic one.
    """
    for _ in range(max_rounds):
        moved = False
        for bias_name, z in pre_acts_fn():
            near = np.any(np.abs(z) < eps, axis=tuple(range(z.ndim - 1)))
            if near.any():
                params[bias_name][near] += delta
                moved = True
        if not moved:
            return
    raise AssertionError("could not move pre-activations off relu kinks")


def toy_skill(sid, name, cat="utilities", subcat="timers", pop=0, desc=None, examples=()):
    return Skill(skill_id=sid, name=name, description=desc if desc is not None else name,
                 example_phrases=tuple(examples), category=cat, subcategory=subcat,
                 popularity=pop)


def toy_catalog():
    return Catalog([
        toy_skill("sk_alarm", "alarm bell ring", cat="utilities", subcat="timers"),
        toy_skill("sk_music", "music tunes songs", cat="media", subcat="audio"),
        toy_skill("sk_pizza", "pizza order food", cat="food", subcat="delivery"),
    ])


def accepted(uid, text, sid, ts=0):
    return LoggedInteraction(utterance=Utterance(uid, text, ts), suggested_skill=sid,
                             accepted=1)


def rejected(uid, text, sid, ts=0):
    return LoggedInteraction(utterance=Utterance(uid, text, ts), suggested_skill=sid,
                             accepted=0)


def toy_feedback(n_per_skill=6):
    """Separable interactions: each skill's texts reuse its own name tokens."""
    texts = {
        "sk_alarm": ["ring the alarm bell", "alarm bell now", "set bell alarm ring"],
        "sk_music": ["play music tunes", "songs and tunes", "music songs please"],
        "sk_pizza": ["order pizza food", "pizza food now", "get food pizza order"],
    }
    out = []
    ts = 0
    for rep in range(n_per_skill):
        for sid, variants in texts.items():
            out.append(accepted(f"u{ts}", variants[rep % len(variants)], sid, ts=ts))
            ts += 1
    return out
