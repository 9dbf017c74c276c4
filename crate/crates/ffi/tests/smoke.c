/* Loads a checkpoint through the C header and segments a synthetic pair. */
#include <stdio.h>
#include <stdlib.h>

#include "varfuse.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke <checkpoint>\n");
        return 2;
    }
    VfModel *model = NULL;
    VfStatus status = vf_model_load("/nonexistent.ckpt", &model);
    printf("missing=%d\n", (int)status);
    if (status != VF_STATUS_IO || model != NULL || vf_last_error_message()[0] == '\0') {
        return 1;
    }
    if (vf_model_load(argv[1], &model) != VF_STATUS_OK) {
        fprintf(stderr, "%s\n", vf_last_error_message());
        return 1;
    }
    size_t classes = vf_model_classes(model);
    printf("classes=%zu version=%s\n", classes, vf_version());

    const size_t h = 32, w = 32;
    double *rgb = malloc(3 * h * w * sizeof(double));
    double *thermal = malloc(h * w * sizeof(double));
    uint8_t *labels = malloc(h * w);
    double *conf = malloc(classes * h * w * sizeof(double));
    for (size_t i = 0; i < 3 * h * w; i++) rgb[i] = (double)(i % 13) / 12.0;
    for (size_t i = 0; i < h * w; i++) thermal[i] = (double)(i % 7) / 6.0;

    int rc = 0;
    if (vf_model_infer(model, rgb, thermal, h, w, 3, 1, labels, conf) != VF_STATUS_OK) {
        fprintf(stderr, "%s\n", vf_last_error_message());
        rc = 1;
    }
    for (size_t p = 0; p < h * w && rc == 0; p++) {
        double sum = 0.0;
        for (size_t c = 0; c < classes; c++) sum += conf[c * h * w + p];
        if (labels[p] >= classes || sum < 1.0 - 1e-9 || sum > 1.0 + 1e-9) rc = 1;
    }
    free(rgb);
    free(thermal);
    free(labels);
    free(conf);
    vf_model_free(model);
    return rc;
}
