#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "svolterra.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            char msg[512];                                            \
            sv_last_error(msg, sizeof msg);                           \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__,   \
                    #cond, msg);                                      \
            return 1;                                                 \
        }                                                             \
    } while (0)

static const char *CONFIG =
    "operator.modes = 8\n"
    "solver.dt = 1e-2\n"
    "seed = 5\n";

int main(void) {
    double rho = 0.0;
    CHECK(sv_sector_parameter(1.5, 0.0, &rho) == SV_STATUS_OK);
    CHECK(rho > 1.499 && rho < 1.501);

    SvProblem *problem = NULL;
    CHECK(sv_problem_new(CONFIG, &problem) == SV_STATUS_OK);
    size_t modes = 0, steps = 0;
    CHECK(sv_problem_shape(problem, &modes, &steps) == SV_STATUS_OK);
    CHECK(modes == 8 && steps == 100);

    SvPath *path = NULL;
    CHECK(sv_simulate(problem, 5, 0, &path) == SV_STATUS_OK);
    size_t needed = 0;
    CHECK(sv_path_values(path, NULL, 0, &needed) == SV_STATUS_BUFFER_TOO_SMALL);
    CHECK(needed == (steps + 1) * modes);
    double *values = malloc(needed * sizeof *values);
    CHECK(sv_path_values(path, values, needed, &needed) == SV_STATUS_OK);
    CHECK(values[0] == 1.0);
    free(values);
    sv_path_free(path);
    sv_problem_free(problem);

    SvProblem *bad = NULL;
    CHECK(sv_problem_new("noise.sigma = 2\n", &bad) == SV_STATUS_CONFIG);
    CHECK(bad == NULL);
    char msg[256];
    size_t n = sv_last_error(msg, sizeof msg);
    CHECK(n > 0 && strstr(msg, "noise.sigma") != NULL);

    printf("ok %s\n", sv_version());
    return 0;
}
