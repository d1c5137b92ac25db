#include <math.h>
#include <stdio.h>
#include <string.h>

#include "ignition.h"

#define CHECK(call)                                                                  \
    do {                                                                             \
        IgnStatus s_ = (call);                                                       \
        if (s_ != IGN_STATUS_OK) {                                                   \
            fprintf(stderr, "%s: %s (%s)\n", #call, ign_status_name(s_), ign_last_error()); \
            return 1;                                                                \
        }                                                                            \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: drive <checkpoint>\n");
        return 2;
    }
    IgnTrack *track = NULL;
    IgnModel *model = NULL;
    CHECK(ign_track_load("oval", &track));
    CHECK(ign_model_load(argv[1], &model));

    uint32_t w = 0, h = 0;
    CHECK(ign_model_input_size(model, &w, &h));
    unsigned char frame[64 * 36];
    if (w * h != sizeof frame) {
        fprintf(stderr, "unexpected input size %ux%u\n", w, h);
        return 1;
    }

    IgnCarState state;
    CHECK(ign_track_start(track, &state));
    double worst = 0.0;
    for (int i = 0; i < 3000; i++) {
        IgnCommand cmd;
        CHECK(ign_oracle_command(track, &state, &cmd));
        if (cmd.throttle * cmd.brake != 0.0) {
            fprintf(stderr, "both pedals at step %d\n", i);
            return 1;
        }
        CHECK(ign_vehicle_step(track, &state, &cmd, &state));
        double s, off;
        CHECK(ign_track_locate(track, &state, &s, &off));
        if (fabs(off) > worst) worst = fabs(off);
    }
    if (state.step_count != 3000 || state.speed <= 0.0) {
        fprintf(stderr, "car did not move: step %llu speed %f\n", (unsigned long long)state.step_count, state.speed);
        return 1;
    }

    CHECK(ign_render(track, &state, w, h, 7, false, frame, sizeof frame));
    IgnCommand pred;
    CHECK(ign_model_predict(model, frame, sizeof frame, w, h, state.speed * 2.236936, &pred));
    if (!isfinite(pred.steer_deg) || pred.throttle * pred.brake != 0.0) {
        fprintf(stderr, "bad prediction\n");
        return 1;
    }

    IgnModel *missing = (IgnModel *)1;
    if (ign_model_load("/nonexistent/model.ckpt", &missing) != IGN_STATUS_IO || missing != NULL || strlen(ign_last_error()) == 0) {
        fprintf(stderr, "missing checkpoint not reported\n");
        return 1;
    }
    if (ign_model_predict(model, frame, sizeof frame, 160, 90, 0.0, &pred) != IGN_STATUS_MISMATCH) {
        fprintf(stderr, "size mismatch not reported\n");
        return 1;
    }

    ign_model_free(model);
    ign_track_free(track);
    printf("ok %s worst offset %.2f m, steer %.1f\n", ign_version(), worst, pred.steer_deg);
    return 0;
}
