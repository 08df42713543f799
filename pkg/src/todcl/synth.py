"""Deterministic synthetic MultiWOZ-style corpus, entity db and schema.

Used to build the bundled fixture and arbitrarily large corpora for
plumbing tests. Everything here is a function of the seed.
"""

from __future__ import annotations

import random

from .corpus import ActionState, DialogSession, DialogState, DialogTurn, Goal, Schema
from .dbkit import EntityDb, active_domain, db_state_for

AREAS = ["centre", "north", "south", "east", "west"]
PRICES = ["cheap", "moderate", "expensive"]
FOODS = ["italian", "chinese", "indian", "jamaican", "british", "french", "thai", "modern european"]
ATTR_TYPES = ["theatre", "museum", "college", "park", "nightclub", "swimming pool"]
HOTEL_TYPES = ["hotel", "guesthouse"]
STARS = ["2", "3", "4", "5"]
PLACES = ["cambridge", "london kings cross", "stansted airport", "ely", "norwich", "peterborough"]
DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]
PEOPLE = ["1", "2", "3", "4", "5", "6", "7"]

SCHEMA_DICT = {
    "domains": {
        "restaurant": {
            "informable": ["food", "pricerange", "area", "name"],
            "book": ["people", "day"],
            "requestable": ["phone", "address", "postcode", "reference"],
        },
        "hotel": {
            "informable": ["type", "pricerange", "stars", "area", "name"],
            "book": ["people", "day"],
            "requestable": ["phone", "address", "postcode", "reference"],
        },
        "attraction": {
            "informable": ["type", "area", "name"],
            "requestable": ["phone", "address", "postcode"],
        },
        "train": {
            "informable": ["departure", "destination", "day", "id"],
            "book": ["people"],
            "requestable": ["price", "duration", "leave", "reference"],
        },
    },
    "act_domains": ["general"],
    "acts": ["inform", "request", "nooffer", "recommend", "select", "offerbook", "offerbooked", "reqmore", "bye"],
    "act_slots": ["choice"],
    "placeholders": [
        "[value_name]", "[value_choice]", "[value_food]", "[value_area]", "[value_price]", "[value_pricerange]",
        "[value_type]", "[value_stars]", "[value_phone]", "[value_address]", "[value_postcode]",
        "[value_reference]", "[value_id]", "[value_leave]", "[value_duration]", "[value_departure]",
        "[value_destination]", "[value_day]", "[value_people]",
    ],
}

NAME_A = ["golden", "royal", "little", "old", "blue", "grand", "river", "green", "silver", "red"]
NAME_B = {
    "restaurant": ["kitchen", "garden", "house", "table", "bistro"],
    "hotel": ["lodge", "inn", "court", "manor", "house"],
    "attraction": ["hall", "gallery", "place", "yard", "centre"],
}

# slot phrasing inside user turns
NOUN = {"restaurant": "restaurant", "hotel": "place to stay", "attraction": "place to visit", "train": "train"}


def make_schema() -> Schema:
    return Schema.from_dict(SCHEMA_DICT)


def make_db(seed: int = 0) -> EntityDb:
    rng = random.Random(seed)
    ents: dict[str, list[dict]] = {"restaurant": [], "hotel": [], "attraction": [], "train": []}
    used: set[str] = set()

    def name(domain):
        for _ in range(20):
            n = f"the {rng.choice(NAME_A)} {rng.choice(NAME_B[domain])}"
            if n not in used:
                break
        else:
            n = f"{n} {sum(1 for u in used if u.startswith(n)) + 1}"
        used.add(n)
        return n

    def contact(e):
        e["phone"] = "01223" + "".join(rng.choice("0123456789") for _ in range(6))
        e["postcode"] = "cb" + str(rng.randint(1, 5)) + rng.choice("abcdefg") + rng.choice("hjklmn")
        e["address"] = f"{rng.randint(1, 99)} {rng.choice(['mill', 'park', 'king', 'bridge'])} street"
        return e

    for food in FOODS:
        for area in AREAS:
            for _ in range(rng.choice([0, 1, 1, 2, 3])):
                ents["restaurant"].append(
                    contact({"name": name("restaurant"), "food": food, "area": area, "pricerange": rng.choice(PRICES)})
                )
    for area in AREAS:
        for htype in HOTEL_TYPES:
            for _ in range(rng.choice([1, 2, 3])):
                ents["hotel"].append(
                    contact(
                        {
                            "name": name("hotel"),
                            "type": htype,
                            "area": area,
                            "pricerange": rng.choice(PRICES),
                            "stars": rng.choice(STARS),
                        }
                    )
                )
    for atype in ATTR_TYPES:
        for area in AREAS:
            # the db fixture promises exactly three theatres in the centre
            k = 3 if (atype, area) == ("theatre", "centre") else rng.choice([0, 1, 2])
            for _ in range(k):
                ents["attraction"].append(contact({"name": name("attraction"), "type": atype, "area": area}))
    n = 0
    for dep in PLACES:
        for dest in PLACES:
            if dep == dest or "cambridge" not in (dep, dest):
                continue
            for day in DAYS:
                for _ in range(rng.choice([1, 2])):
                    n += 1
                    ents["train"].append(
                        {
                            "id": f"tr{1000 + 37 * n % 9000}",
                            "departure": dep,
                            "destination": dest,
                            "day": day,
                            "leave": f"{rng.randint(5, 22):02d}:{rng.choice(['00', '15', '30', '45'])}",
                            "duration": f"{rng.randint(17, 88)} minutes",
                            "price": f"{rng.randint(4, 40)}.{rng.choice(['10', '50', '60'])} pounds",
                        }
                    )
    return EntityDb(ents, make_schema())


class _SessionBuilder:
    def __init__(self, rng: random.Random, db: EntityDb, schema: Schema):
        self.rng, self.db, self.schema = rng, db, schema
        self.turns: list[DialogTurn] = []
        self.state: dict[str, dict[str, str]] = {}
        self.prev_state = DialogState()
        self.active = None

    def add(self, user: str, acts, response: str):
        state = DialogState({d: dict(s) for d, s in self.state.items()})
        self.active = active_domain(state, self.prev_state, self.schema, self.active)
        db = db_state_for(self.db, state, self.active)
        self.turns.append(
            DialogTurn(
                turn_index=len(self.turns),
                user_utterance=" ".join(user.split()),
                dialog_state=state,
                db_state=db,
                action_state=ActionState(acts),
                response=" ".join(response.split()),
            )
        )
        self.prev_state = state
        return db

    def count(self, domain):
        return len(self.db.matches(domain, self.state.get(domain, {})))


def _constraint_phrase(domain: str, cons: dict[str, str]) -> str:
    if domain == "restaurant":
        parts = [cons.get("pricerange", ""), cons.get("food", ""), "restaurant"]
        s = " ".join(p for p in parts if p)
        if "area" in cons:
            s += f" in the {cons['area']}"
        return s
    if domain == "hotel":
        parts = [cons.get("pricerange", ""), cons.get("stars", "") and f"{cons['stars']} star", cons.get("type", "hotel")]
        s = " ".join(p for p in parts if p)
        if "area" in cons:
            s += f" in the {cons['area']}"
        return s
    if domain == "attraction":
        s = cons.get("type", "attraction")
        if "area" in cons:
            s += f" in the {cons['area']}"
        return s
    s = "train"
    if "departure" in cons:
        s += f" from {cons['departure']}"
    if "destination" in cons:
        s += f" to {cons['destination']}"
    if "day" in cons:
        s += f" on {cons['day']}"
    return s


OPENERS = ["i am looking for a", "i need a", "can you help me find a", "i would like a", "please find me a"]
THANKS = ["thanks , that is all i need .", "thank you , goodbye .", "great , that is everything ."]


def _pick_constraints(rng, db: EntityDb, domain: str) -> dict[str, str]:
    ent = rng.choice(db.entities[domain])
    keys = {
        "restaurant": ["food", "area", "pricerange"],
        "hotel": ["type", "area", "pricerange", "stars"],
        "attraction": ["type", "area"],
        "train": ["departure", "destination", "day"],
    }[domain]
    if domain == "train":
        chosen = keys
    else:
        k = rng.randint(1, min(3, len(keys)))
        chosen = [s for s in keys if s in rng.sample(keys, k)]
    return {s: ent[s] for s in chosen}


def _segment(b: _SessionBuilder, domain: str, goal_info: dict, goal_req: list):
    rng = b.rng
    cons = _pick_constraints(rng, b.db, domain)
    # occasionally start from an unsatisfiable request and recover
    if domain in ("restaurant", "attraction") and rng.random() < 0.15:
        bad = dict(cons)
        slot = "food" if domain == "restaurant" else "type"
        pool = FOODS if domain == "restaurant" else ATTR_TYPES
        bad.setdefault("area", rng.choice(AREAS))
        for cand in pool:
            trial = dict(bad, **{slot: cand})
            if not b.db.matches(domain, trial):
                bad = trial
                break
        if not b.db.matches(domain, bad):
            b.state[domain] = dict(bad)
            b.add(
                f"{rng.choice(OPENERS)} {_constraint_phrase(domain, bad)} .",
                [(domain, "nooffer", [slot, "area"]), (domain, "request", [slot])],
                f"i am sorry , there are no [value_{slot}] places in the [value_area] . would you like to try another {slot} ?",
            )
            ent = rng.choice(b.db.matches(domain, {"area": bad["area"]}) or b.db.entities[domain])
            cons = {slot: ent[slot], "area": ent["area"]}
            b.state[domain] = dict(cons)
            b.add(f"how about {cons[slot]} instead ?", *_offer(b, domain, cons))
        else:
            b.state[domain] = dict(cons)
            b.add(f"{rng.choice(OPENERS)} {_constraint_phrase(domain, cons)} .", *_offer(b, domain, cons))
    else:
        b.state[domain] = dict(cons)
        if domain != "train" and len(cons) == 1 and b.count(domain) > 3 and rng.random() < 0.6:
            ask = "area" if "area" not in cons else "pricerange" if domain != "attraction" else "type"
            b.add(
                f"{rng.choice(OPENERS)} {_constraint_phrase(domain, cons)} .",
                [(domain, "inform", ["choice"]), (domain, "request", [ask])],
                f"there are [value_choice] options . which [value_{ask if ask != 'pricerange' else 'price'}] would you like ?".replace(
                    "[value_price]", "price range"
                ).replace("[value_area]", "area").replace("[value_type]", "type"),
            )
            pool = {"area": AREAS, "pricerange": PRICES, "type": ATTR_TYPES}[ask]
            options = [v for v in pool if b.db.matches(domain, dict(cons, **{ask: v}))]
            cons[ask] = rng.choice(options)
            b.state[domain] = dict(cons)
            b.add(f"the {cons[ask]} please .", *_offer(b, domain, cons))
        else:
            b.add(f"{rng.choice(OPENERS)} {_constraint_phrase(domain, cons)} .", *_offer(b, domain, cons))
    goal_info.update(cons)

    req_pool = {
        "restaurant": ["phone", "address", "postcode"],
        "hotel": ["phone", "address", "postcode"],
        "attraction": ["phone", "address", "postcode"],
        "train": ["price", "duration", "leave"],
    }[domain]
    if rng.random() < 0.7:
        reqs = rng.sample(req_pool, rng.randint(1, 2))
        goal_req.extend(reqs)
        words = {"phone": "phone number", "address": "address", "postcode": "postcode", "price": "price",
                 "duration": "travel time", "leave": "departure time"}
        ask = " and the ".join(words[r] for r in reqs)
        b.add(
            f"can i get the {ask} ?",
            [(domain, "inform", reqs)],
            " and ".join(f"the {words[r]} is [value_{r}]" for r in reqs) + " .",
        )
    if domain != "attraction" and rng.random() < 0.5:
        people = rng.choice(PEOPLE)
        book = {"people": people}
        if domain != "train":
            book["day"] = rng.choice(DAYS)
        b.state[domain] = dict(b.state[domain], **book)
        when = f" on {book['day']}" if "day" in book else ""
        b.add(
            f"please book it for {people} people{when} .",
            [(domain, "offerbooked", ["reference"])],
            "booking was successful . the reference number is [value_reference] .",
        )
        goal_req.append("reference")


def _offer(b: _SessionBuilder, domain: str, cons: dict[str, str]):
    if domain == "train":
        return (
            [(domain, "inform", ["id", "leave"]), (domain, "offerbook", [])],
            "[value_id] leaves at [value_leave] . shall i book it ?",
        )
    n = b.count(domain)
    slots = [s for s in cons if s != "name"]
    ph = {"pricerange": "[value_price]"}
    if n == 1:
        desc = " ".join(ph.get(s, f"[value_{s}]") for s in slots)
        return [(domain, "inform", ["name", *slots])], f"[value_name] is a {desc} {NOUN[domain]} ."
    return (
        [(domain, "inform", ["choice", "name"]), (domain, "recommend", slots)],
        "there are [value_choice] matches . i recommend [value_name] in the [value_area] ."
        if "area" in slots
        else "there are [value_choice] matches . i recommend [value_name] .",
    )


def make_session(rng: random.Random, db: EntityDb, schema: Schema, session_id: str) -> DialogSession:
    b = _SessionBuilder(rng, db, schema)
    r = rng.random()
    domains = rng.sample(["restaurant", "hotel", "attraction", "train"], 3 if r < 0.1 else 2 if r < 0.4 else 1)
    informable: dict[str, dict[str, str]] = {}
    requestable: dict[str, tuple[str, ...]] = {}
    for domain in domains:
        info: dict[str, str] = {}
        req: list[str] = []
        _segment(b, domain, info, req)
        informable[domain] = info
        requestable[domain] = tuple(dict.fromkeys(req))
    b.add(rng.choice(THANKS), [("general", "bye", [])], "thank you for using our service . goodbye .")
    return DialogSession(session_id=session_id, goal=Goal(informable, requestable), turns=b.turns)


def make_corpus(n: int, seed: int = 0, db: EntityDb | None = None) -> list[DialogSession]:
    schema = make_schema()
    db = db or make_db()
    rng = random.Random(seed)
    return [make_session(rng, db, schema, f"syn{seed:02d}-{i:05d}") for i in range(n)]
