/* Minimal consumer of the C API: mask, softmax, one attention layer. */
#include <math.h>
#include <stdio.h>

#include "metaroute.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        MrStatus s_ = (call);                                              \
        if (s_ != MR_STATUS_OK) {                                          \
            fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_,        \
                    mr_last_error_message());                              \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    enum { N = 3, D = 8 };
    double mask[N * 4], scores[N * 4], probs[N * 4];
    /* FLAIR and T2 available */
    CHECK(mr_build_mask(0x9, N, mask));
    for (int i = 0; i < N * 4; i++) scores[i] = 0.1 * i;
    CHECK(mr_masked_softmax(scores, mask, N, 4, probs));
    for (int r = 0; r < N; r++) {
        double sum = 0.0;
        for (int c = 0; c < 4; c++) sum += probs[r * 4 + c];
        if (fabs(sum - 1.0) > 1e-12 || probs[r * 4 + 1] != 0.0) {
            fprintf(stderr, "row %d not a distribution over available columns\n", r);
            return 1;
        }
    }

    MrTmaxModel *model = NULL;
    CHECK(mr_tmax_new(D, 2 * D, 7, &model));
    double tokens[N * D], out[N * D], attn[N * 4];
    for (int i = 0; i < N * D; i++) tokens[i] = sin(i);
    CHECK(mr_tmax_forward(model, tokens, N, 0x9, out, attn));
    mr_tmax_free(model);

    double degenerate[4] = {-INFINITY, -INFINITY, -INFINITY, -INFINITY};
    if (mr_masked_softmax(scores, degenerate, 1, 4, probs) != MR_STATUS_DEGENERATE_MASK) {
        fprintf(stderr, "expected a degenerate mask error\n");
        return 1;
    }
    printf("metaroute %s ok\n", mr_version());
    return 0;
}
