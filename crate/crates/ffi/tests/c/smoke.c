/* Exercises the C header end to end; prints key=value lines. */
#include "harmorch.h"
#include <stdio.h>
#include <string.h>

#define CHECK(call)                                                        \
  do {                                                                     \
    int32_t rc_ = (call);                                                  \
    if (rc_ != HM_OK) {                                                    \
      fprintf(stderr, "%s -> %d: %s\n", #call, rc_, hm_last_error());      \
      return 1;                                                            \
    }                                                                      \
  } while (0)

static unsigned char buf[1 << 20];

int main(int argc, char **argv) {
  if (argc != 2) {
    fprintf(stderr, "usage: smoke file.mid\n");
    return 2;
  }
  FILE *f = fopen(argv[1], "rb");
  if (!f) return 2;
  size_t n = fread(buf, 1, sizeof buf, f);
  fclose(f);

  HmScore *score = NULL;
  HmSkeleton *sk = NULL;
  CHECK(hm_score_from_midi(buf, n, &score));
  CHECK(hm_skeleton_analyze(score, &sk));
  printf("bars=%zu\nnotes=%zu\nbeats=%zu\n", hm_score_bar_count(score), hm_score_note_count(score),
         hm_skeleton_beat_count(sk));

  HmDissonance d;
  CHECK(hm_dissonance(score, sk, 1.0, 10.0, &d));
  printf("d_total=%.17g\n", d.total);

  size_t len = 0;
  int32_t rc = hm_score_tokenize(score, 0, 0, 0, NULL, 0, &len);
  printf("tokenize_probe=%d\ntokens=%zu\n", rc, len);

  unsigned char junk[] = "MThd";
  HmScore *bad = NULL;
  rc = hm_score_from_midi(junk, 4, &bad);
  printf("junk_rc=%d\njunk_msg_nonempty=%d\n", rc, strlen(hm_last_error()) > 0);

  HmModel *model = NULL;
  CHECK(hm_model_new_desk(&model));
  HmSamplingParams p = hm_sampling_defaults();
  p.seed = 3;
  HmScore *a = NULL, *b = NULL;
  CHECK(hm_generate(model, sk, &p, &a));
  CHECK(hm_generate(model, sk, &p, &b));
  HmBytes ma, mb;
  CHECK(hm_score_to_midi(a, &ma));
  CHECK(hm_score_to_midi(b, &mb));
  printf("generated_equal=%d\n", ma.len == mb.len && memcmp(ma.data, mb.data, ma.len) == 0);
  hm_bytes_free(ma);
  hm_bytes_free(mb);

  hm_score_free(a);
  hm_score_free(b);
  hm_model_free(model);
  hm_skeleton_free(sk);
  hm_score_free(score);
  return 0;
}
