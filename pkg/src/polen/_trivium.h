/* Trivium with the three registers held in 128-bit integers.
 *
 * Same layout as the Python implementation: register A holds s1..s93 with
 * s_k at bit (92 - (k - 1)), and so on for B and C, so one shift by 32
 * advances 32 steps.  After key/IV loading A = key << 13, B = iv << 4 and
 * C = 7, where key and iv are the little-endian integers of the 10 bytes.
 */
#ifndef POLEN_TRIVIUM_H
#define POLEN_TRIVIUM_H

#include <stdint.h>

typedef unsigned __int128 u128;

typedef struct {
    u128 a, b, c;
} triv_t;

static inline u128 u128_make(uint64_t lo, uint64_t hi) {
    return ((u128)hi << 64) | lo;
}

static inline uint32_t triv_chunk(triv_t *s) {
    u128 a = s->a, b = s->b, c = s->c;
    u128 t1 = (a >> 27) ^ a;
    u128 t2 = (b >> 15) ^ b;
    u128 t3 = (c >> 45) ^ c;
    uint32_t z = (uint32_t)(t1 ^ t2 ^ t3);
    uint32_t u1 = (uint32_t)(t1 ^ ((a >> 2) & (a >> 1)) ^ (b >> 6));
    uint32_t u2 = (uint32_t)(t2 ^ ((b >> 2) & (b >> 1)) ^ (c >> 24));
    uint32_t u3 = (uint32_t)(t3 ^ ((c >> 2) & (c >> 1)) ^ (a >> 24));
    s->a = (a >> 32) | ((u128)u3 << 61);
    s->b = (b >> 32) | ((u128)u1 << 52);
    s->c = (c >> 32) | ((u128)u2 << 79);
    return z;
}

static inline void triv_init(triv_t *s, uint64_t ka_lo, uint64_t ka_hi, uint64_t iv_lo, uint64_t iv_hi) {
    s->a = u128_make(ka_lo, ka_hi);
    s->b = u128_make(iv_lo, iv_hi) << 4;
    s->c = 7;
    for (int i = 0; i < 36; i++)
        triv_chunk(s);
}

static inline void triv_get(const triv_t *s, uint64_t *out) {
    out[0] = (uint64_t)s->a; out[1] = (uint64_t)(s->a >> 64);
    out[2] = (uint64_t)s->b; out[3] = (uint64_t)(s->b >> 64);
    out[4] = (uint64_t)s->c; out[5] = (uint64_t)(s->c >> 64);
}

static inline void triv_set(triv_t *s, const uint64_t *in) {
    s->a = u128_make(in[0], in[1]);
    s->b = u128_make(in[2], in[3]);
    s->c = u128_make(in[4], in[5]);
}

#endif
