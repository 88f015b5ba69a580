#include <stdio.h>
#include <string.h>

#include "avloc.h"

#define CHECK(cond)                                           \
    do {                                                      \
        if (!(cond)) {                                        \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                         \
        }                                                     \
    } while (0)

int main(int argc, char **argv) {
    CHECK(argc == 3);
    const char *store = argv[1];
    const char *fixtures = argv[2];

    AvlocBox a = {0, 0, 10, 10}, b = {5, 0, 15, 10}, out;
    double v = -1;
    CHECK(avloc_iou(a, b, &v) == AVLOC_STATUS_OK);
    CHECK(v > 0.3333 && v < 0.3334);

    AvlocBox raw = {-5, -5, 300, 120};
    CHECK(avloc_box_validate(raw, 224, 224, &out) == AVLOC_STATUS_OK);
    CHECK(out.x1 == 0 && out.x2 == 224 && out.y2 == 120);

    AvlocBox flat = {10, 10, 10, 20};
    CHECK(avloc_box_validate(flat, 224, 224, &out) == AVLOC_STATUS_DEGENERATE_BOX);
    char *msg = avloc_last_error_message();
    CHECK(msg != NULL && strstr(msg, "degenerate") != NULL);
    avloc_string_free(msg);

    CHECK(avloc_box_expand_shrink(a, 2, 224, 224, &out) == AVLOC_STATUS_OK);
    CHECK(out.x1 == 0 && out.x2 == 12);

    char *json = NULL;
    CHECK(avloc_parse_reply("gen_loc", "Sure: {\"bbox\": [1, 2, 30, 40], \"description\": \"x\"}", &json) ==
          AVLOC_STATUS_OK);
    CHECK(strstr(json, "\"bbox\"") != NULL);
    avloc_string_free(json);

    AvlocEngine *engine = NULL;
    CHECK(avloc_engine_new_replay(NULL, store, &engine) == AVLOC_STATUS_OK);
    const char *line =
        "{\"id\":\"violin-001\",\"image\":\"media/violin-001.png\",\"audio\":\"media/violin-001.wav\","
        "\"width\":224,\"height\":224,\"mode\":\"single\",\"gt\":[{\"class\":\"violin\",\"box\":[28,36,184,214]}]}";
    CHECK(avloc_engine_run_sample(engine, line, fixtures, &json) == AVLOC_STATUS_OK);
    CHECK(strstr(json, "\"status\":\"ok\"") != NULL);
    avloc_string_free(json);
    CHECK(avloc_engine_run_sample(NULL, line, fixtures, &json) == AVLOC_STATUS_NULL_ARGUMENT);
    avloc_engine_free(engine);

    puts("ok");
    return 0;
}
