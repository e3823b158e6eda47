#include "mt/features.hpp"

#include "mt/csv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace mt {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

const AssetFeatures* FeatureFrame::find(const std::string& asset_id) const {
    for (const auto& a : assets)
        if (a.asset_id == asset_id) return &a;
    return nullptr;
}

std::vector<double> simple_returns(const std::vector<double>& closes) {
    if (closes.size() < 2) throw RangeError("simple_returns: need at least 2 closes");
    std::vector<double> r(closes.size() - 1);
    for (size_t i = 0; i + 1 < closes.size(); ++i) {
        if (!(closes[i] > 0.0) || !(closes[i + 1] > 0.0))
            throw DataError("simple_returns: nonpositive close at index " + std::to_string(i));
        r[i] = closes[i + 1] / closes[i] - 1.0;
    }
    return r;
}

std::vector<double> ewma_vol(const std::vector<double>& returns, int span) {
    if (span < 2) throw RangeError("ewma_vol: span must be >= 2");
    std::vector<double> vol(returns.size());
    if (returns.empty()) return vol;
    double lambda = 1.0 - 2.0 / (span + 1.0);
    double var = returns[0] * returns[0];
    vol[0] = std::max(std::sqrt(var), kVolFloor);
    for (size_t i = 1; i < returns.size(); ++i) {
        var = lambda * var + (1.0 - lambda) * returns[i] * returns[i];
        vol[i] = std::max(std::sqrt(var), kVolFloor);
    }
    return vol;
}

std::vector<double> norm_return(const std::vector<double>& returns,
                                const std::vector<double>& vol, int horizon) {
    bool known = false;
    for (int h : kReturnHorizons) known = known || h == horizon;
    if (!known) throw RangeError("norm_return: unsupported horizon " + std::to_string(horizon));
    if (vol.size() != returns.size())
        throw DimensionError("norm_return: vol and returns lengths differ");
    std::vector<double> out(returns.size(), kNaN);
    double sqrth = std::sqrt(static_cast<double>(horizon));
    for (size_t i = 0; i < returns.size(); ++i) {
        if (i + 1 < static_cast<size_t>(horizon)) continue;
        double prod = 1.0;
        for (size_t j = i + 1 - horizon; j <= i; ++j) prod *= 1.0 + returns[j];
        out[i] = (prod - 1.0) / (vol[i] * sqrth);
    }
    return out;
}

namespace {

// Half-life EWMA: decay = 0.5^(1/span), seeded with the first value.
std::vector<double> halflife_ewma(const std::vector<double>& x, int span) {
    std::vector<double> out(x.size());
    if (x.empty()) return out;
    double decay = std::pow(0.5, 1.0 / span);
    double acc = x[0];
    out[0] = acc;
    for (size_t i = 1; i < x.size(); ++i) {
        acc = decay * acc + (1.0 - decay) * x[i];
        out[i] = acc;
    }
    return out;
}

// Trailing sample sd over up to `window` values; expands while filling so the
// early region stays point-in-time. NaN until two values exist. NaN inputs
// are skipped (used for the sd over the partially-defined quotient series).
std::vector<double> trailing_std(const std::vector<double>& x, int window) {
    std::vector<double> out(x.size(), kNaN);
    for (size_t i = 0; i < x.size(); ++i) {
        size_t lo = i + 1 >= static_cast<size_t>(window) ? i + 1 - window : 0;
        double sum = 0.0;
        size_t n = 0;
        for (size_t j = lo; j <= i; ++j) {
            if (std::isnan(x[j])) continue;
            sum += x[j];
            ++n;
        }
        if (n < 2) continue;
        double mean = sum / static_cast<double>(n);
        double ss = 0.0;
        for (size_t j = lo; j <= i; ++j) {
            if (std::isnan(x[j])) continue;
            double d = x[j] - mean;
            ss += d * d;
        }
        out[i] = std::sqrt(ss / static_cast<double>(n - 1));
    }
    return out;
}

} // namespace

std::vector<double> macd_signal(const std::vector<double>& closes, int short_span,
                                int long_span) {
    bool known = false;
    for (auto [s, l] : kMacdTimescales) known = known || (s == short_span && l == long_span);
    if (!known || short_span >= long_span)
        throw RangeError("macd_signal: unsupported timescales (" + std::to_string(short_span) +
                         "," + std::to_string(long_span) + ")");
    auto fast = halflife_ewma(closes, short_span);
    auto slow = halflife_ewma(closes, long_span);
    auto sd_close = trailing_std(closes, 63);
    std::vector<double> q(closes.size(), kNaN);
    for (size_t i = 0; i < closes.size(); ++i) {
        if (std::isnan(sd_close[i])) continue;
        double sd = std::max(sd_close[i], kVolFloor);
        q[i] = (fast[i] - slow[i]) / sd;
    }
    auto sd_q = trailing_std(q, 252);
    std::vector<double> out(closes.size(), kNaN);
    for (size_t i = 0; i < closes.size(); ++i) {
        if (std::isnan(q[i]) || std::isnan(sd_q[i])) continue;
        out[i] = q[i] / std::max(sd_q[i], kVolFloor);
    }
    return out;
}

FeatureFrame build_features(const PricePanel& panel, const CpdTable* cpd) {
    FeatureFrame frame;
    for (int h : kReturnHorizons)
        frame.input_names.push_back("norm_return_" + std::to_string(h));
    for (auto [s, l] : kMacdTimescales)
        frame.input_names.push_back("macd_" + std::to_string(s) + "_" + std::to_string(l));
    frame.has_cpd = cpd != nullptr;
    if (cpd) {
        frame.input_names.push_back("cp_score");
        frame.input_names.push_back("cp_location_norm");
    }
    const int n_in = frame.n_inputs();

    if (cpd) {
        for (const auto& [key, v] : *cpd) {
            (void)v;
            if (!panel.asset_index(key.first))
                throw JoinError("cpd join: unknown asset " + key.first);
            if (!panel.date_index(key.second))
                throw JoinError("cpd join: unknown date " + key.second.iso() + " for asset " +
                                key.first);
        }
    }

    size_t nd = panel.n_dates();
    for (size_t a = 0; a < panel.n_assets(); ++a) {
        std::vector<double> closes(nd);
        for (size_t di = 0; di < nd; ++di) closes[di] = panel.close_at(di, a);
        auto rets = simple_returns(closes);
        auto vol = ewma_vol(rets);

        // per-date columns (index by date; return index i maps to date i+1)
        std::vector<std::vector<double>> cols;
        for (int h : kReturnHorizons) {
            auto nr = norm_return(rets, vol, h);
            std::vector<double> col(nd, kNaN);
            for (size_t i = 0; i < nr.size(); ++i) col[i + 1] = nr[i];
            cols.push_back(std::move(col));
        }
        for (auto [s, l] : kMacdTimescales) cols.push_back(macd_signal(closes, s, l));

        AssetFeatures feat;
        feat.asset_id = panel.assets[a].asset_id;
        feat.sector = panel.assets[a].sector;
        for (size_t t = 0; t < nd; ++t) {
            bool ok = true;
            for (const auto& c : cols) ok = ok && !std::isnan(c[t]);
            const CpdValues* cv = nullptr;
            if (ok && cpd) {
                auto it = cpd->find({feat.asset_id, panel.dates[t]});
                if (it == cpd->end())
                    ok = false;
                else
                    cv = &it->second;
            }
            if (!ok) continue;
            feat.dates.push_back(panel.dates[t]);
            for (const auto& c : cols) feat.inputs.push_back(c[t]);
            if (cv) {
                feat.inputs.push_back(cv->cp_score);
                feat.inputs.push_back(cv->cp_location_norm);
            }
            feat.ewma_vol.push_back(vol[t - 1]); // vol estimated through date t
            feat.next_return.push_back(t + 1 < nd ? rets[t] : kNaN);
        }
        if (static_cast<size_t>(n_in) * feat.dates.size() != feat.inputs.size())
            throw ContractError("build_features: ragged rows for " + feat.asset_id);
        frame.assets.push_back(std::move(feat));
    }
    return frame;
}

void save_features_csv(const FeatureFrame& frame, const std::string& path) {
    auto f = open_out(path);
    f << "asset_id,sector_group,date";
    for (const auto& n : frame.input_names) f << ',' << n;
    f << ",ewma_vol,next_return\n";
    for (const auto& a : frame.assets) {
        int n_in = frame.n_inputs();
        for (size_t r = 0; r < a.n_rows(); ++r) {
            f << a.asset_id << ',' << kSectorGroups[a.sector] << ',' << a.dates[r].iso();
            for (int c = 0; c < n_in; ++c)
                f << ',' << format_double(a.inputs[r * n_in + c]);
            f << ',' << format_double(a.ewma_vol[r]) << ',';
            if (!std::isnan(a.next_return[r])) f << format_double(a.next_return[r]);
            f << '\n';
        }
    }
}

FeatureFrame load_features_csv(const std::string& path) {
    auto f = open_in(path);
    std::string line;
    if (!std::getline(f, line)) throw ParseError(path + ": empty features file");
    auto header = split_csv(line);
    if (header.size() < 6 || header[0] != "asset_id" || header[1] != "sector_group" ||
        header[2] != "date" || header[header.size() - 2] != "ewma_vol" ||
        header.back() != "next_return")
        throw ParseError(path + ": bad features header");
    FeatureFrame frame;
    frame.input_names.assign(header.begin() + 3, header.end() - 2);
    frame.has_cpd = !frame.input_names.empty() && frame.input_names.back() == "cp_location_norm";
    int n_in = frame.n_inputs();

    size_t lineno = 1;
    AssetFeatures* cur = nullptr;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv(line);
        if (fields.size() != header.size())
            throw ParseError(path + ":" + std::to_string(lineno) + ": wrong field count");
        if (!cur || cur->asset_id != fields[0]) {
            for (auto& a : frame.assets)
                if (a.asset_id == fields[0])
                    throw ParseError(path + ":" + std::to_string(lineno) +
                                     ": asset rows are not contiguous");
            frame.assets.push_back({});
            cur = &frame.assets.back();
            cur->asset_id = fields[0];
            cur->sector = sector_index(fields[1]);
        }
        cur->dates.push_back(parse_date(fields[2]));
        for (int c = 0; c < n_in; ++c)
            cur->inputs.push_back(parse_double(fields[3 + c], frame.input_names[c]));
        cur->ewma_vol.push_back(parse_double(fields[3 + n_in], "ewma_vol"));
        const auto& nr = fields[4 + n_in];
        cur->next_return.push_back(nr.empty() ? kNaN : parse_double(nr, "next_return"));
    }
    return frame;
}

} // namespace mt
