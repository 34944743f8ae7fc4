"""Frozen reference instantiations used by golden tests and shipped dumps.

REFERENCE_SESSIONS_OF_LINK is a fixed 20-link / 20-session instantiation
of the sessions-sharing-a-link family at the default design cardinalities
(20 global, 10 local).  TOY_SESSIONS_OF_LINK is the 3-link / 3-session
instance the structural goldens are pinned to.
"""

REFERENCE_SESSIONS_OF_LINK: dict[int, tuple[int, ...]] = {
    0: (3, 4, 6, 7, 8, 14, 15, 17, 18, 19),
    1: (0, 2, 3, 6, 8, 10, 11, 12, 16, 17),
    2: (0, 5, 6, 7, 11, 13, 14, 15, 18, 19),
    3: (0, 1, 4, 6, 10, 11, 13, 16, 17, 19),
    4: (0, 3, 4, 7, 8, 12, 13, 14, 18, 19),
    5: (1, 3, 6, 10, 11, 12, 13, 15, 18, 19),
    6: (0, 1, 3, 5, 6, 7, 11, 14, 15, 16),
    7: (1, 3, 4, 6, 12, 14, 15, 16, 17, 19),
    8: (1, 2, 5, 6, 7, 8, 9, 10, 12, 14),
    9: (0, 2, 3, 4, 5, 12, 13, 15, 16, 17),
    10: (0, 1, 4, 6, 7, 8, 9, 11, 16, 19),
    11: (4, 5, 6, 7, 14, 15, 16, 17, 18, 19),
    12: (2, 3, 4, 6, 7, 8, 12, 15, 17, 18),
    13: (4, 6, 8, 13, 14, 15, 16, 17, 18, 19),
    14: (0, 1, 3, 4, 5, 6, 8, 12, 16, 17),
    15: (2, 3, 6, 10, 11, 12, 13, 15, 16, 19),
    16: (1, 2, 3, 5, 6, 8, 9, 12, 15, 16),
    17: (1, 2, 7, 8, 12, 13, 14, 16, 18, 19),
    18: (0, 1, 3, 4, 6, 7, 12, 13, 18, 19),
    19: (0, 2, 4, 5, 8, 12, 14, 15, 16, 17),
}

TOY_SESSIONS_OF_LINK: dict[int, tuple[int, ...]] = {
    0: (0, 1),
    1: (0, 2),
    2: (1, 2),
}
