#include "mt/changepoint.hpp"

#include "mt/csv.hpp"
#include "mt/features.hpp"
#include "mt/parallel.hpp"
#include "mt/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace mt {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kBadNlml = 1e18;

void check_hyper(KernelKind kind, const GpHyper& h) {
    bool ok = h.amp1 > 0.0 && h.len1 > 0.0 && h.noise > 0.0;
    if (kind == KernelKind::changepoint)
        ok = ok && h.amp2 > 0.0 && h.len2 > 0.0 && h.steepness > 0.0;
    if (!ok) throw ContractError("gp hyperparameters must be strictly positive");
}

double matern32(double dist, double amp, double len) {
    double z = 1.7320508075688772935 * dist / len;
    return amp * (1.0 + z) * std::exp(-z);
}

// K(x,x') = s(x)s(x') k1 + (1-s(x))(1-s(x')) k2 with a sigmoid switch at x0.
void build_kernel(const std::vector<double>& x, KernelKind kind, const GpHyper& h,
                  Eigen::MatrixXd& k) {
    int n = static_cast<int>(x.size());
    k.resize(n, n);
    if (kind == KernelKind::matern32) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j <= i; ++j) {
                double v = matern32(std::fabs(x[i] - x[j]), h.amp1, h.len1);
                k(i, j) = v;
                k(j, i) = v;
            }
        return;
    }
    double x0 = std::clamp(h.x0, x.front(), x.back());
    std::vector<double> sw(n);
    for (int i = 0; i < n; ++i) sw[i] = 1.0 / (1.0 + std::exp(-h.steepness * (x[i] - x0)));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
            double d = std::fabs(x[i] - x[j]);
            double v = sw[i] * sw[j] * matern32(d, h.amp2, h.len2) +
                       (1.0 - sw[i]) * (1.0 - sw[j]) * matern32(d, h.amp1, h.len1);
            k(i, j) = v;
            k(j, i) = v;
        }
}

// NLML through Cholesky with the jitter ladder; kBadNlml signals failure.
double nlml_or_bad(const std::vector<double>& y, const std::vector<double>& x,
                   KernelKind kind, const GpHyper& h) {
    int n = static_cast<int>(y.size());
    Eigen::MatrixXd k;
    build_kernel(x, kind, h, k);
    const double jitters[] = {0.0, 1e-8, 1e-6, 1e-4};
    for (double jit : jitters) {
        Eigen::MatrixXd kn = k;
        for (int i = 0; i < n; ++i) kn(i, i) += h.noise + jit;
        Eigen::LLT<Eigen::MatrixXd> llt(kn);
        if (llt.info() != Eigen::Success) continue;
        Eigen::Map<const Eigen::VectorXd> yv(y.data(), n);
        Eigen::VectorXd alpha = llt.solve(yv);
        double quad = yv.dot(alpha);
        double logdet = 0.0;
        for (int i = 0; i < n; ++i) logdet += std::log(llt.matrixL()(i, i));
        return 0.5 * quad + logdet + 0.5 * n * kLog2Pi;
    }
    return kBadNlml;
}

std::vector<double> index_grid(size_t n) {
    std::vector<double> x(n);
    std::iota(x.begin(), x.end(), 0.0);
    return x;
}

// ---- Nelder-Mead over an unconstrained parameter vector -------------------

struct NmResult {
    std::vector<double> x;
    double f = kBadNlml;
};

NmResult nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                     const std::vector<double>& x0, const std::vector<double>& step,
                     int max_iters) {
    size_t d = x0.size();
    std::vector<std::vector<double>> pts(d + 1, x0);
    for (size_t i = 0; i < d; ++i) pts[i + 1][i] += step[i];
    std::vector<double> fv(d + 1);
    for (size_t i = 0; i <= d; ++i) fv[i] = f(pts[i]);

    auto order = [&] {
        std::vector<size_t> idx(d + 1);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return fv[a] < fv[b]; });
        std::vector<std::vector<double>> p2(d + 1);
        std::vector<double> f2(d + 1);
        for (size_t i = 0; i <= d; ++i) {
            p2[i] = pts[idx[i]];
            f2[i] = fv[idx[i]];
        }
        pts.swap(p2);
        fv.swap(f2);
    };
    order();

    for (int it = 0; it < max_iters; ++it) {
        double prev_best = fv[0];
        std::vector<double> centroid(d, 0.0);
        for (size_t i = 0; i < d; ++i) {
            for (size_t j = 0; j < d; ++j) centroid[j] += pts[i][j];
        }
        for (size_t j = 0; j < d; ++j) centroid[j] /= static_cast<double>(d);

        auto blend = [&](double coef) {
            std::vector<double> p(d);
            for (size_t j = 0; j < d; ++j)
                p[j] = centroid[j] + coef * (pts[d][j] - centroid[j]);
            return p;
        };
        auto refl = blend(-1.0);
        double fr = f(refl);
        if (fr < fv[0]) {
            auto exp_ = blend(-2.0);
            double fe = f(exp_);
            if (fe < fr) {
                pts[d] = exp_;
                fv[d] = fe;
            } else {
                pts[d] = refl;
                fv[d] = fr;
            }
        } else if (fr < fv[d - 1]) {
            pts[d] = refl;
            fv[d] = fr;
        } else {
            auto con = blend(fr < fv[d] ? -0.5 : 0.5);
            double fc = f(con);
            if (fc < std::min(fr, fv[d])) {
                pts[d] = con;
                fv[d] = fc;
            } else {
                for (size_t i = 1; i <= d; ++i) {
                    for (size_t j = 0; j < d; ++j)
                        pts[i][j] = pts[0][j] + 0.5 * (pts[i][j] - pts[0][j]);
                    fv[i] = f(pts[i]);
                }
            }
        }
        order();
        if (prev_best - fv[0] < 1e-6) break;
    }
    return {pts[0], fv[0]};
}

GpHyper unpack(KernelKind kind, const std::vector<double>& p) {
    GpHyper h;
    if (kind == KernelKind::matern32) {
        h.amp1 = std::exp(p[0]);
        h.len1 = std::exp(p[1]);
        h.noise = std::exp(p[2]);
    } else {
        h.amp1 = std::exp(p[0]);
        h.len1 = std::exp(p[1]);
        h.amp2 = std::exp(p[2]);
        h.len2 = std::exp(p[3]);
        h.noise = std::exp(p[4]);
        h.x0 = p[5];
        h.steepness = std::exp(p[6]);
    }
    return h;
}

} // namespace

double gp_nlml(const std::vector<double>& window, KernelKind kind, const GpHyper& hyper) {
    if (window.empty()) throw RangeError("gp_nlml: empty window");
    check_hyper(kind, hyper);
    double v = nlml_or_bad(window, index_grid(window.size()), kind, hyper);
    if (v >= kBadNlml)
        throw SingularKernelError("gp_nlml: kernel not SPD after jitter escalation");
    return v;
}

namespace {

GPFit fit_kernel(const std::vector<double>& window, KernelKind kind, uint64_t seed,
                 int max_iters, const GPFit* plain_hint) {
    size_t n = window.size();
    auto x = index_grid(n);
    auto objective = [&](const std::vector<double>& p) {
        return nlml_or_bad(window, x, kind, unpack(kind, p));
    };

    Rng rng(Rng::derive(seed, {Rng::hash_str("gp_starts"), static_cast<uint64_t>(kind)}));
    std::vector<std::vector<double>> starts;
    double nmax = static_cast<double>(n);
    if (kind == KernelKind::matern32) {
        starts.push_back({std::log(0.5), std::log(nmax / 4.0), std::log(0.5)});
        starts.push_back({std::log(0.01), std::log(nmax / 3.0), std::log(1.0)});
        starts.push_back({std::log(1.0), std::log(2.0), std::log(0.1)});
        while (starts.size() < 8)
            starts.push_back({rng.uniform(std::log(1e-3), std::log(2.0)),
                              rng.uniform(std::log(0.5), std::log(2.0 * nmax)),
                              rng.uniform(std::log(1e-3), std::log(2.0))});
    } else {
        // Degenerate start: the plain optimum expressed through the blended
        // kernel (sub-amplitudes doubled, near-flat switch), so the richer
        // model never fits worse than the plain one at its own optimum.
        GPFit base;
        if (plain_hint)
            base = *plain_hint;
        else
            base = fit_kernel(window, KernelKind::matern32, seed, max_iters, nullptr);
        starts.push_back({std::log(2.0 * base.hyper.amp1), std::log(base.hyper.len1),
                          std::log(2.0 * base.hyper.amp1), std::log(base.hyper.len1),
                          std::log(base.hyper.noise), (nmax - 1.0) / 2.0, std::log(1e-9)});
        // x0 grid so localization does not hinge on one descent path
        for (int i = 0; i < 7; ++i) {
            double x0 = (nmax - 1.0) * (i + 1) / 8.0;
            starts.push_back({rng.uniform(std::log(0.05), std::log(2.0)),
                              rng.uniform(std::log(0.5), std::log(nmax)),
                              rng.uniform(std::log(0.05), std::log(2.0)),
                              rng.uniform(std::log(0.5), std::log(nmax)),
                              rng.uniform(std::log(0.01), std::log(1.0)), x0,
                              rng.uniform(std::log(0.3), std::log(3.0))});
        }
    }

    std::vector<double> step(starts[0].size(), 0.3);
    if (kind == KernelKind::changepoint) step[5] = 2.0;

    NmResult best;
    bool any = false;
    for (const auto& s : starts) {
        if (objective(s) >= kBadNlml) continue;
        NmResult r = nelder_mead(objective, s, step, max_iters);
        if (r.f >= kBadNlml) continue;
        any = true;
        if (r.f < best.f) best = r;
    }
    if (!any)
        throw SingularKernelError("fit_gp: every start failed factorization");

    GPFit fit;
    fit.kind = kind;
    fit.hyper = unpack(kind, best.x);
    if (kind == KernelKind::changepoint)
        fit.hyper.x0 = std::clamp(fit.hyper.x0, 0.0, nmax - 1.0);
    fit.nlml = best.f;
    return fit;
}

} // namespace

GPFit fit_gp(const std::vector<double>& window, KernelKind kind, uint64_t seed, int max_iters) {
    if (window.size() < 2) throw RangeError("fit_gp: window too short");
    return fit_kernel(window, kind, seed, max_iters, nullptr);
}

ChangepointRecord detect_changepoint(const std::vector<double>& window, int lookback,
                                     const Date& date, long t, uint64_t seed, int max_iters) {
    if (lookback < 5) throw RangeError("detect_changepoint: lookback must be >= 5");
    if (window.size() != static_cast<size_t>(lookback))
        throw DimensionError("detect_changepoint: window length " +
                             std::to_string(window.size()) + " != lookback " +
                             std::to_string(lookback));

    ChangepointRecord rec;
    rec.date = date;
    rec.t = t;

    double mean = 0.0;
    for (double v : window) mean += v;
    mean /= static_cast<double>(lookback);
    double var = 0.0;
    for (double v : window) var += (v - mean) * (v - mean);
    double sd = std::sqrt(var / static_cast<double>(lookback));
    if (sd <= 1e-8) {
        // Degenerate flat window: nothing to detect.
        rec.cp_location = t;
        rec.cp_location_norm = 0.0;
        rec.cp_score = 0.0;
        return rec;
    }
    std::vector<double> y(window.size());
    for (size_t i = 0; i < window.size(); ++i) y[i] = (window[i] - mean) / sd;

    GPFit plain = fit_kernel(y, KernelKind::matern32, seed, max_iters, nullptr);
    GPFit cp = fit_kernel(y, KernelKind::changepoint, seed, max_iters, &plain);

    long local = std::lround(std::clamp(cp.hyper.x0, 0.0, static_cast<double>(lookback - 1)));
    rec.cp_location = t - (lookback - 1) + local;
    rec.cp_location_norm =
        static_cast<double>(t - rec.cp_location) / static_cast<double>(lookback);
    double denom = std::max(cp.nlml, plain.nlml);
    double score = denom == 0.0 ? 0.0 : 1.0 - cp.nlml / denom;
    rec.cp_score = std::clamp(score, 0.0, 1.0);
    return rec;
}

std::map<std::string, std::vector<ChangepointRecord>> run_cpd(const PricePanel& panel,
                                                              const CpdConfig& cfg) {
    size_t nd = panel.n_dates();
    if (nd < static_cast<size_t>(cfg.lookback) + 1)
        throw RangeError("run_cpd: panel shorter than lookback");

    struct Task {
        size_t asset;
        long t;
    };
    std::vector<Task> tasks;
    // Return series per asset, seeded with a flat first day so the record
    // count is n_dates - lookback + 1.
    std::vector<std::vector<double>> rets(panel.n_assets());
    for (size_t a = 0; a < panel.n_assets(); ++a) {
        std::vector<double> closes(nd);
        for (size_t di = 0; di < nd; ++di) closes[di] = panel.close_at(di, a);
        auto r = simple_returns(closes);
        rets[a].assign(nd, 0.0);
        for (size_t i = 0; i < r.size(); ++i) rets[a][i + 1] = r[i];
        for (long t = cfg.lookback - 1; t < static_cast<long>(nd); ++t)
            tasks.push_back({a, t});
    }

    std::vector<ChangepointRecord> results(tasks.size());
    parallel_for(tasks.size(), cfg.threads, [&](size_t i) {
        const Task& tk = tasks[i];
        const auto& id = panel.assets[tk.asset].asset_id;
        std::vector<double> window(rets[tk.asset].begin() + (tk.t - cfg.lookback + 1),
                                   rets[tk.asset].begin() + (tk.t + 1));
        uint64_t seed = Rng::derive(cfg.seed, {Rng::hash_str(id.c_str()),
                                               static_cast<uint64_t>(tk.t)});
        results[i] = detect_changepoint(window, cfg.lookback, panel.dates[tk.t], tk.t, seed,
                                        cfg.max_opt_iters);
    });

    std::map<std::string, std::vector<ChangepointRecord>> out;
    for (size_t i = 0; i < tasks.size(); ++i)
        out[panel.assets[tasks[i].asset].asset_id].push_back(results[i]);
    return out;
}

CpdTable to_cpd_table(const std::map<std::string, std::vector<ChangepointRecord>>& by_asset) {
    CpdTable table;
    for (const auto& [asset, recs] : by_asset)
        for (const auto& r : recs)
            table[{asset, r.date}] = {r.cp_score, r.cp_location_norm};
    return table;
}

void save_cpd_csv(const std::vector<ChangepointRecord>& records, const std::string& path) {
    auto f = open_out(path);
    f << "date,t,cp_location,cp_location_norm,cp_score\n";
    for (const auto& r : records)
        f << r.date.iso() << ',' << r.t << ',' << r.cp_location << ','
          << format_double(r.cp_location_norm) << ',' << format_double(r.cp_score) << '\n';
}

std::vector<ChangepointRecord> load_cpd_csv(const std::string& path) {
    auto f = open_in(path);
    std::string line;
    if (!std::getline(f, line)) throw ParseError(path + ": empty cpd file");
    if (split_csv(line) !=
        std::vector<std::string>{"date", "t", "cp_location", "cp_location_norm", "cp_score"})
        throw ParseError(path + ": bad cpd header '" + line + "'");
    std::vector<ChangepointRecord> out;
    size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv(line);
        if (fields.size() != 5)
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected 5 fields");
        ChangepointRecord r;
        r.date = parse_date(fields[0]);
        r.t = parse_long(fields[1], "t");
        r.cp_location = parse_long(fields[2], "cp_location");
        r.cp_location_norm = parse_double(fields[3], "cp_location_norm");
        r.cp_score = parse_double(fields[4], "cp_score");
        out.push_back(r);
    }
    return out;
}

} // namespace mt
