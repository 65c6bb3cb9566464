#include <stdio.h>
#include <string.h>
#include "mrckg.h"

int main(void) {
    MrckgBenchmark *b = NULL;
    if (mrckg_benchmark_build_synthetic(60, 3, 0, 2, &b) != MRCKG_STATUS_OK) {
        char msg[256];
        mrckg_last_error(msg, sizeof msg);
        fprintf(stderr, "build failed: %s\n", msg);
        return 1;
    }
    size_t n = mrckg_benchmark_snapshot_count(b);
    size_t entities = 0, train = 0;
    if (mrckg_benchmark_snapshot_sizes(b, n - 1, &entities, &train, NULL, NULL) != MRCKG_STATUS_OK) {
        return 2;
    }
    MrckgStatus st = mrckg_benchmark_snapshot_sizes(b, n, NULL, NULL, NULL, NULL);
    char msg[256];
    mrckg_last_error(msg, sizeof msg);
    printf("version=%s snapshots=%zu entities=%zu train=%zu oob=%d msg_nonempty=%d\n",
           mrckg_version(), n, entities, train, (int)st, msg[0] != 0);
    mrckg_benchmark_free(b);
    return st == MRCKG_STATUS_OUT_OF_RANGE ? 0 : 3;
}
