#include "stainsep/losses.hpp"

#include <cstdio>

namespace stainsep {

std::string loss_report_csv_row(std::int64_t step, const LossReport& r) {
    char buf[320];
    std::snprintf(buf, sizeof(buf),
                  "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%lld,%lld",
                  static_cast<long long>(step), r.rec_l1, r.rec_perceptual, r.ent, r.col,
                  r.ov, r.mask, r.total, static_cast<long long>(r.omega_tau),
                  static_cast<long long>(r.omega_mask));
    return buf;
}

}  // namespace stainsep
