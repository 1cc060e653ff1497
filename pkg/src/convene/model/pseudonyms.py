"""Built-in pseudonymous profile sets.

Each set holds 64 entries so assignment within any realistic cohort never
collides. Entries are (displayName, avatar) pairs; names follow the
"Anonymous X" convention so peers see no real identity cues.
"""

from __future__ import annotations

_ANIMALS = [
    ("Owl", "🦉"), ("Bear", "🐻"), ("Fox", "🦊"), ("Wolf", "🐺"),
    ("Otter", "🦦"), ("Hedgehog", "🦔"), ("Rabbit", "🐰"), ("Deer", "🦌"),
    ("Lynx", "🐱"), ("Badger", "🦡"), ("Raccoon", "🦝"), ("Moose", "🫎"),
    ("Seal", "🦭"), ("Dolphin", "🐬"), ("Whale", "🐋"), ("Turtle", "🐢"),
    ("Penguin", "🐧"), ("Falcon", "🦅"), ("Raven", "🐦‍⬛"), ("Swan", "🦢"),
    ("Heron", "🪿"), ("Sparrow", "🐦"), ("Robin", "🐤"), ("Crane", "🦩"),
    ("Tiger", "🐯"), ("Lion", "🦁"), ("Leopard", "🐆"), ("Panther", "🐈‍⬛"),
    ("Elephant", "🐘"), ("Rhino", "🦏"), ("Hippo", "🦛"), ("Giraffe", "🦒"),
    ("Zebra", "🦓"), ("Bison", "🦬"), ("Camel", "🐫"), ("Llama", "🦙"),
    ("Koala", "🐨"), ("Panda", "🐼"), ("Sloth", "🦥"), ("Lemur", "🐒"),
    ("Gecko", "🦎"), ("Frog", "🐸"), ("Newt", "🐉"), ("Salamander", "🦎"),
    ("Octopus", "🐙"), ("Squid", "🦑"), ("Crab", "🦀"), ("Lobster", "🦞"),
    ("Shrimp", "🦐"), ("Jellyfish", "🪼"), ("Starfish", "⭐"), ("Urchin", "🪸"),
    ("Bee", "🐝"), ("Butterfly", "🦋"), ("Beetle", "🪲"), ("Dragonfly", "🦟"),
    ("Ant", "🐜"), ("Cricket", "🦗"), ("Snail", "🐌"), ("Ladybug", "🐞"),
    ("Hamster", "🐹"), ("Mole", "🐀"), ("Ferret", "🦨"), ("Chipmunk", "🐿️"),
]

_NATURE = [
    ("Mountain", "⛰️"), ("River", "🏞️"), ("Forest", "🌲"), ("Meadow", "🌼"),
    ("Ocean", "🌊"), ("Desert", "🏜️"), ("Glacier", "🧊"), ("Canyon", "🏔️"),
    ("Valley", "🌄"), ("Prairie", "🌾"), ("Tundra", "❄️"), ("Marsh", "🌿"),
    ("Lagoon", "💧"), ("Reef", "🪸"), ("Dune", "🏖️"), ("Cliff", "🪨"),
    ("Cascade", "💦"), ("Spring", "⛲"), ("Brook", "🐟"), ("Delta", "🗺️"),
    ("Island", "🏝️"), ("Peninsula", "🧭"), ("Archipelago", "🌐"), ("Fjord", "🚣"),
    ("Summit", "🗻"), ("Ridge", "🌋"), ("Plateau", "🛤️"), ("Basin", "🪣"),
    ("Grove", "🌳"), ("Thicket", "🌱"), ("Orchard", "🍎"), ("Garden", "🌷"),
    ("Blossom", "🌸"), ("Petal", "🌺"), ("Fern", "🪴"), ("Moss", "🍀"),
    ("Willow", "🌿"), ("Cedar", "🌲"), ("Maple", "🍁"), ("Birch", "🪵"),
    ("Aurora", "🌌"), ("Comet", "☄️"), ("Nebula", "🌠"), ("Eclipse", "🌑"),
    ("Sunrise", "🌅"), ("Sunset", "🌇"), ("Twilight", "🌆"), ("Horizon", "🌤️"),
    ("Breeze", "🍃"), ("Gale", "🌬️"), ("Monsoon", "🌧️"), ("Thunder", "⛈️"),
    ("Lightning", "⚡"), ("Rainbow", "🌈"), ("Mist", "🌫️"), ("Frost", "🥶"),
    ("Ember", "🔥"), ("Pebble", "🪨"), ("Crystal", "💎"), ("Geyser", "♨️"),
    ("Boulder", "🗿"), ("Cavern", "🕳️"), ("Harbor", "⚓"), ("Shoal", "🐚"),
]

_NUMERIC_SEEDS = [
    1042, 1187, 1336, 1490, 1623, 1771, 1904, 2058,
    2217, 2345, 2481, 2630, 2779, 2913, 3064, 3198,
    3327, 3460, 3591, 3748, 3876, 4012, 4159, 4287,
    4420, 4568, 4703, 4851, 4986, 5119, 5263, 5392,
    5540, 5671, 5814, 5948, 6093, 6221, 6370, 6502,
    6647, 6789, 6918, 7056, 7203, 7331, 7484, 7619,
    7742, 7895, 8023, 8164, 8307, 8439, 8586, 8714,
    8851, 8990, 9127, 9254, 9408, 9531, 9676, 9812,
]

PSEUDONYM_SETS: dict[str, list[tuple[str, str]]] = {
    "animal": [(f"Anonymous {name}", avatar) for name, avatar in _ANIMALS],
    "nature": [(f"Anonymous {name}", avatar) for name, avatar in _NATURE],
    "numeric": [(f"Anonymous {n}", "🔢") for n in _NUMERIC_SEEDS],
}

assert all(len(v) == 64 for v in PSEUDONYM_SETS.values())
assert all(len({name for name, _ in v}) == 64 for v in PSEUDONYM_SETS.values())
