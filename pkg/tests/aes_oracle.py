"""Straight-line AES-128 block encryption, written from FIPS-197 for test use only.

Deliberately shares nothing with the package's cipher backend.
"""


def _xtime(b):
    b <<= 1
    if b & 0x100:
        b ^= 0x11B
    return b


def _gmul(a, b):
    p = 0
    while b:
        if b & 1:
            p ^= a
        a = _xtime(a)
        b >>= 1
    return p


def _sbox():
    box = [0] * 256
    for x in range(256):
        # multiplicative inverse by brute force, then the affine map
        inv = 0
        if x:
            inv = next(y for y in range(1, 256) if _gmul(x, y) == 1)
        s = inv
        for shift in range(1, 5):
            s ^= ((inv << shift) | (inv >> (8 - shift))) & 0xFF
        box[x] = s ^ 0x63
    return box


SBOX = _sbox()


def expand_key(key):
    assert len(key) == 16
    words = [list(key[4 * i:4 * i + 4]) for i in range(4)]
    rcon = 1
    for i in range(4, 44):
        temp = list(words[i - 1])
        if i % 4 == 0:
            temp = temp[1:] + temp[:1]
            temp = [SBOX[b] for b in temp]
            temp[0] ^= rcon
            rcon = _xtime(rcon)
        words.append([a ^ b for a, b in zip(words[i - 4], temp)])
    return [sum(words[4 * r:4 * r + 4], []) for r in range(11)]


def encrypt_block(key, block):
    assert len(block) == 16
    round_keys = expand_key(key)
    state = [b ^ k for b, k in zip(block, round_keys[0])]
    for rnd in range(1, 11):
        state = [SBOX[b] for b in state]
        # column-major state: byte index = row + 4 * col
        state = [state[(r + 4 * ((c + r) % 4))] for c in range(4) for r in range(4)]
        state = [state[i] for i in range(16)]
        if rnd != 10:
            mixed = []
            for c in range(4):
                col = state[4 * c:4 * c + 4]
                for r in range(4):
                    mixed.append(
                        _gmul(col[r], 2)
                        ^ _gmul(col[(r + 1) % 4], 3)
                        ^ col[(r + 2) % 4]
                        ^ col[(r + 3) % 4]
                    )
            state = mixed
        state = [b ^ k for b, k in zip(state, round_keys[rnd])]
    return bytes(state)
