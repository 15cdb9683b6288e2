#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "vqad.h"

/* argv[1]: path of a .vqad file. Prints levels, task, one point and the total size. */
int main(int argc, char **argv) {
    if (argc != 2) return 64;
    FILE *f = fopen(argv[1], "rb");
    if (!f) return 65;
    fseek(f, 0, SEEK_END);
    long n = ftell(f);
    fseek(f, 0, SEEK_SET);
    uint8_t *buf = malloc((size_t)n);
    if (fread(buf, 1, (size_t)n, f) != (size_t)n) return 66;
    fclose(f);

    VqadModel *m = NULL;
    if (vqad_decode(buf, (size_t)n, &m) != VQAD_STATUS_OK) return 1;
    size_t levels = 0;
    VqadTask task;
    vqad_levels(m, &levels);
    vqad_task(m, &task);
    double x[2] = {0.25, -0.5}, y[3];
    size_t written = 0;
    if (vqad_decode_point(m, x, 2, NULL, levels - 1, y, 3, &written) != VQAD_STATUS_OK) return 2;
    VqadSizeReport r;
    vqad_size_report(m, &r);
    printf("%zu %d %zu %.17g %.17g %.17g %zu\n", levels, (int)task, written, y[0], y[1], y[2], r.total);

    if (vqad_decode(buf, 3, &m) != VQAD_STATUS_TRUNCATED) return 3;
    char msg[256];
    if (vqad_last_error_message(msg, sizeof msg) == 0) return 4;
    vqad_free(m);
    free(buf);
    return 0;
}
