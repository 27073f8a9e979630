#include <stdio.h>
#include "dpls.h"

int main(void) {
    DplsClassMap *map = dpls_class_map_semantic_kitti();
    DplsEvaluator *ev = dpls_evaluator_new(map);
    uint8_t sem[3] = {0, 0, 8};
    uint32_t inst[3] = {1, 1, 0};
    DplsScores s;
    if (dpls_evaluator_add_scan(ev, sem, inst, sem, inst, 3) != DPLS_STATUS_OK) return 1;
    if (dpls_evaluator_scores(ev, &s) != DPLS_STATUS_OK) return 2;
    if (dpls_scan_read(NULL, NULL) != DPLS_STATUS_NULL_POINTER) return 3;
    printf("lstq=%.3f classes=%zu\n", s.lstq, dpls_class_map_num_classes(map));
    dpls_evaluator_free(ev);
    dpls_class_map_free(map);
    return 0;
}
