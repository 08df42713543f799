"""Random generators shared by property tests and the acceptance suite."""

import random

from todcl.corpus import ActionState, DialogState, TurnPrediction
from todcl.dbkit import DbBucket

WORDS = ["north", "cheap", "kings", "cross", "modern", "european", "blue", "river", "7", "friday",
         "golden", "house", "09:00", "st", "johns", "wagamama", "mumford", "theatre", "airport"]


def random_state(rng: random.Random, schema) -> DialogState:
    domains = rng.sample(list(schema.domains), rng.randint(0, len(schema.domains)))
    cons = {}
    for d in domains:
        slots = list(schema.domains[d].state_slots)
        names = set(slots)
        pool = [w for w in WORDS if w not in names]
        cons[d] = {s: " ".join(rng.choice(pool) for _ in range(rng.randint(1, 3)))
                   for s in rng.sample(slots, rng.randint(1, len(slots)))}
    return DialogState(cons)


def random_acts(rng: random.Random, schema) -> ActionState:
    domains = list(schema.domains) + list(schema.act_domains)
    out = []
    for _ in range(rng.randint(0, 4)):
        d = rng.choice(domains)
        slots = list(schema.domains[d].all_slots) if d in schema.domains else list(schema.act_slots)
        out.append((d, rng.choice(schema.acts), rng.sample(slots, rng.randint(0, min(3, len(slots))))))
    return ActionState(out)


def random_prediction(rng: random.Random, schema, goal) -> TurnPrediction:
    """Often-plausible turn: goal-shaped state, offer and request placeholders at random."""
    if rng.random() < 0.6:
        cons = {d: {s: v for s, v in slots.items() if rng.random() < 0.8} for d, slots in goal.informable.items()}
        state = DialogState(cons)
    else:
        state = random_state(rng, schema)
    acts = random_acts(rng, schema)
    if rng.random() < 0.5 and goal.domains:
        acts = ActionState(acts.acts + [(rng.choice(goal.domains), "inform", ("name",))])
    ph = [p for p in schema.placeholders if rng.random() < 0.3]
    response = " ".join(["here", *ph, "."])
    return TurnPrediction(state=state, db=DbBucket(rng.randint(0, 3)), acts=acts, response=response)
