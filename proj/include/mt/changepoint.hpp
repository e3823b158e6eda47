#pragma once

#include "mt/dates.hpp"
#include "mt/errors.hpp"
#include "mt/market_data.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mt {

struct ChangepointRecord {
    Date date;
    long t = 0;           // panel date index
    long cp_location = 0; // in [t - lookback + 1, t]
    double cp_location_norm = 0.0;
    double cp_score = 0.0;
};

enum class KernelKind { matern32, changepoint };

// Hyperparameters; the changepoint kernel blends two Matern-3/2 kernels
// through a sigmoid switch at x0 with the given steepness.
struct GpHyper {
    double amp1 = 1.0;   // sigma_f^2 of the (first) Matern kernel
    double len1 = 1.0;   // lengthscale
    double amp2 = 1.0;   // second kernel (changepoint only)
    double len2 = 1.0;
    double noise = 0.1;  // sigma_n^2
    double x0 = 0.0;     // switch location (changepoint only)
    double steepness = 1.0;
};

struct GPFit {
    KernelKind kind = KernelKind::matern32;
    GpHyper hyper;
    double nlml = 0.0;
};

struct CpdConfig {
    int lookback = 21; // 126 accepted behind the same code path
    uint64_t seed = 42;
    int threads = 1;
    int max_opt_iters = 80;
};

// NLML = 1/2 y' (K + noise I)^-1 y + 1/2 log|K + noise I| + n/2 log 2pi,
// evaluated through a Cholesky factorization with jitter escalation
// 1e-8 -> 1e-6 -> 1e-4; SingularKernelError after that.
double gp_nlml(const std::vector<double>& window, KernelKind kind, const GpHyper& hyper);

// Multi-start Nelder-Mead over log-parameter space (8 seeded starts; for the
// changepoint kernel one start degenerates to the plain kernel's optimum).
// Converges when the best NLML improves by less than 1e-6 over an iteration.
GPFit fit_gp(const std::vector<double>& window, KernelKind kind, uint64_t seed,
             int max_iters = 80);

// Fits plain and changepoint kernels on a standardized window and scores the
// improvement: cp_score = 1 - NLML_cp / max(NLML_cp, NLML_plain), clamped to
// [0,1]. A zero-variance window short-circuits to score 0 at location t.
ChangepointRecord detect_changepoint(const std::vector<double>& window, int lookback,
                                     const Date& date, long t, uint64_t seed,
                                     int max_iters = 80);

// One record per asset per date with >= lookback return history. Tasks are
// seeded from (seed, asset, t), so the output is identical for any thread
// count.
std::map<std::string, std::vector<ChangepointRecord>> run_cpd(const PricePanel& panel,
                                                              const CpdConfig& cfg);

// (asset_id, date) -> (cp_score, cp_location_norm); the join view consumed by
// feature assembly.
struct CpdValues {
    double cp_score = 0.0;
    double cp_location_norm = 0.0;
};
using CpdTable = std::map<std::pair<std::string, Date>, CpdValues>;

CpdTable to_cpd_table(const std::map<std::string, std::vector<ChangepointRecord>>& by_asset);

// Per-asset CSV: date,t,cp_location,cp_location_norm,cp_score
void save_cpd_csv(const std::vector<ChangepointRecord>& records, const std::string& path);
std::vector<ChangepointRecord> load_cpd_csv(const std::string& path);

} // namespace mt
