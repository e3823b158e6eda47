#pragma once

#include "mt/dates.hpp"
#include "mt/errors.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace mt {

// The nine sector buckets used as the static category vocabulary.
inline constexpr std::array<const char*, 9> kSectorGroups = {
    "Agriculture", "Mining",    "Construction", "Manufacturing", "Transport/Utilities",
    "Wholesale",   "Retail",    "Finance",      "Services"};

int sector_index(const std::string& name); // throws DataError on unknown name

struct PriceBar {
    std::string asset_id;
    std::string ticker;
    Date date;
    double close = 0.0;
    std::string sector_group;
};

struct AssetMeta {
    std::string asset_id;
    std::string ticker;
    int sector = 0; // index into kSectorGroups
};

// Aligned close-price panel: every asset has a close on every date.
struct PricePanel {
    std::vector<Date> dates;
    std::vector<AssetMeta> assets;
    std::vector<double> closes; // dates.size() x assets.size(), row-major by date

    double close_at(size_t date_idx, size_t asset_idx) const {
        return closes[date_idx * assets.size() + asset_idx];
    }
    size_t n_dates() const { return dates.size(); }
    size_t n_assets() const { return assets.size(); }
    std::optional<size_t> asset_index(const std::string& asset_id) const;
    std::optional<size_t> date_index(const Date& d) const;
};

struct WalkForwardSplit {
    Date train_start;
    Date train_end; // inclusive, last training date
    Date test_start;
    Date test_end; // inclusive
    double validation_fraction = 0.20;
    int test_year = 0;
};

// Reads `asset_id,ticker,date,close,sector_group` rows. Malformed rows raise
// ParseError with the 1-based line number; close <= 0 raises DataError.
std::vector<PriceBar> load_price_csv(const std::string& path);

// Builds the aligned panel. Any duplicated (asset_id, date) pair is a hard
// PitViolationError naming the first offender; deduplication would hide the
// exact failure mode this guard exists to catch. Assets that do not cover the
// surviving panel calendar are dropped (reported through `warnings` and on
// stderr as `WARN excluded <asset_id> <reason>`); fewer than two survivors is
// a UniverseError.
PricePanel pit_guard(const std::vector<PriceBar>& bars,
                     std::vector<std::string>* warnings = nullptr);

// Expanding-window protocol: split k trains on every date strictly before
// Jan 1 of (first_test_year + k) and tests on that calendar year. Validation
// is the chronologically last `validation_fraction` of each training range.
std::vector<WalkForwardSplit> make_walk_forward(const std::vector<Date>& dates,
                                                int first_test_year, int last_test_year,
                                                double validation_fraction = 0.20);

// Indices of `dates` covered by a split's training range, and the boundary
// that separates fit rows from validation rows.
struct TrainRangeIndices {
    size_t train_begin = 0, train_end = 0; // [begin, end) into dates
    size_t validation_begin = 0;           // first validation index
};
TrainRangeIndices train_range_indices(const std::vector<Date>& dates,
                                      const WalkForwardSplit& split);

void save_panel_csv(const PricePanel& panel, const std::string& path);

} // namespace mt
