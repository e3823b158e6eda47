#pragma once

#include "mt/changepoint.hpp"
#include "mt/market_data.hpp"

#include <string>
#include <vector>

namespace mt {

inline constexpr int kReturnHorizons[] = {1, 21, 63, 126, 252};
inline constexpr std::pair<int, int> kMacdTimescales[] = {{8, 24}, {16, 48}, {32, 96}};
inline constexpr double kVolFloor = 1e-8;
inline constexpr int kVolSpan = 60;

// Per-asset feature rows, aligned vectors indexed by row. Rows exist only
// once every input column is defined (the 252-day horizon governs), so model
// windows can assume consecutive rows. next_return is NaN on each asset's
// final date: the target for date t is the simple return realized at t+1 and
// the last date has none.
struct AssetFeatures {
    std::string asset_id;
    int sector = 0;
    std::vector<Date> dates;
    std::vector<double> inputs; // rows x n_inputs, row-major
    std::vector<double> ewma_vol;
    std::vector<double> next_return; // NaN when absent

    size_t n_rows() const { return dates.size(); }
};

struct FeatureFrame {
    std::vector<std::string> input_names;
    bool has_cpd = false;
    std::vector<AssetFeatures> assets;

    int n_inputs() const { return static_cast<int>(input_names.size()); }
    const AssetFeatures* find(const std::string& asset_id) const;
};

// r_t = close_t / close_{t-1} - 1; result[i] is the return realized on date
// index i+1. Throws DataError on nonpositive closes.
std::vector<double> simple_returns(const std::vector<double>& closes);

// Exponentially weighted sd of returns about zero, decay 1 - 2/(span+1),
// seeded with the first squared return, floored at kVolFloor.
std::vector<double> ewma_vol(const std::vector<double>& returns, int span = kVolSpan);

// y_t = (prod_{j=t-h+1..t} (1+r_j) - 1) / (vol_t * sqrt(h)); NaN until h
// returns have accrued. Indexed like `returns`.
std::vector<double> norm_return(const std::vector<double>& returns,
                                const std::vector<double>& vol, int horizon);

// MACD of half-life EWMAs normalized twice: by the trailing-63 close sd and
// by the trailing-252 sd of the first quotient. Trailing sds expand until
// their window fills (point-in-time; no backfill). Indexed by date; NaN while
// undefined.
std::vector<double> macd_signal(const std::vector<double>& closes, int short_span,
                                int long_span);

// Assembles u_r for the whole panel. When cpd is given, cp_score and
// cp_location_norm join by (asset_id, date); a cpd key unknown to the panel
// raises JoinError. Rows missing any required input are dropped.
FeatureFrame build_features(const PricePanel& panel, const CpdTable* cpd = nullptr);

void save_features_csv(const FeatureFrame& frame, const std::string& path);
FeatureFrame load_features_csv(const std::string& path);

} // namespace mt
