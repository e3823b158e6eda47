#include "mt/market_data.hpp"

#include "mt/csv.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace mt {

int sector_index(const std::string& name) {
    for (size_t i = 0; i < kSectorGroups.size(); ++i)
        if (name == kSectorGroups[i]) return static_cast<int>(i);
    throw DataError("unknown sector_group '" + name + "'");
}

std::optional<size_t> PricePanel::asset_index(const std::string& asset_id) const {
    for (size_t i = 0; i < assets.size(); ++i)
        if (assets[i].asset_id == asset_id) return i;
    return std::nullopt;
}

std::optional<size_t> PricePanel::date_index(const Date& d) const {
    auto it = std::lower_bound(dates.begin(), dates.end(), d);
    if (it == dates.end() || !(*it == d)) return std::nullopt;
    return static_cast<size_t>(it - dates.begin());
}

std::vector<PriceBar> load_price_csv(const std::string& path) {
    auto f = open_in(path);
    std::string line;
    if (!std::getline(f, line)) throw ParseError(path + ": empty file, expected header");
    auto header = split_csv(line);
    const std::vector<std::string> expected = {"asset_id", "ticker", "date", "close",
                                               "sector_group"};
    if (std::vector<std::string>(header.begin(), header.end()) != expected)
        throw ParseError(path + ": bad header '" + line + "'");

    std::vector<PriceBar> bars;
    size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto fields = split_csv(line);
        if (fields.size() != 5)
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected 5 fields, got " +
                             std::to_string(fields.size()));
        PriceBar bar;
        bar.asset_id = fields[0];
        bar.ticker = fields[1];
        try {
            bar.date = parse_date(fields[2]);
            bar.close = parse_double(fields[3], "close");
        } catch (const ParseError& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (!(bar.close > 0.0))
            throw DataError(path + ":" + std::to_string(lineno) + ": close must be > 0, got " +
                            fields[3]);
        bar.sector_group = fields[4];
        try {
            sector_index(bar.sector_group);
        } catch (const DataError& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        bars.push_back(std::move(bar));
    }
    return bars;
}

PricePanel pit_guard(const std::vector<PriceBar>& bars, std::vector<std::string>* warnings) {
    // Duplicate (asset_id, date) detection comes first: this is the listing
    // bug that shifts training targets, and it must fail loudly.
    {
        std::set<std::pair<std::string, Date>> seen;
        for (const auto& b : bars) {
            auto key = std::make_pair(b.asset_id, b.date);
            if (!seen.insert(key).second)
                throw PitViolationError("PIT violation: duplicate rows for asset " + b.asset_id +
                                        " on " + b.date.iso());
        }
    }

    struct AssetAcc {
        std::string ticker;
        std::string sector;
        std::map<Date, double> closes;
    };
    std::map<std::string, AssetAcc> by_asset; // keyed by asset_id -> deterministic order
    for (const auto& b : bars) {
        auto& acc = by_asset[b.asset_id];
        if (acc.closes.empty()) {
            acc.ticker = b.ticker;
            acc.sector = b.sector_group;
        }
        acc.closes[b.date] = b.close;
    }

    // Keep assets that cover the calendar spanned by the active set; iterate
    // until stable so dates contributed only by dropped assets cannot hold
    // the survivors hostage.
    std::map<std::string, bool> active;
    for (const auto& [id, acc] : by_asset) {
        (void)acc;
        active[id] = true;
    }
    auto warn = [&](const std::string& id, const std::string& reason) {
        std::string msg = "WARN excluded " + id + " " + reason;
        std::cerr << msg << "\n";
        if (warnings) warnings->push_back(msg);
    };
    std::set<Date> calendar;
    while (true) {
        calendar.clear();
        for (const auto& [id, acc] : by_asset)
            if (active[id])
                for (const auto& [d, c] : acc.closes) {
                    (void)c;
                    calendar.insert(d);
                }
        std::vector<std::string> drop;
        for (const auto& [id, acc] : by_asset) {
            if (!active[id]) continue;
            if (acc.closes.size() < calendar.size()) drop.push_back(id);
        }
        if (drop.empty()) break;
        for (const auto& id : drop) {
            active[id] = false;
            warn(id, "incomplete-coverage " + std::to_string(by_asset[id].closes.size()) + "/" +
                         std::to_string(calendar.size()) + " dates");
        }
    }

    PricePanel panel;
    for (const auto& [id, acc] : by_asset) {
        if (!active[id]) continue;
        panel.assets.push_back({id, acc.ticker, sector_index(acc.sector)});
    }
    if (panel.assets.size() < 2)
        throw UniverseError("universe error: only " + std::to_string(panel.assets.size()) +
                            " asset(s) survive panel alignment");
    panel.dates.assign(calendar.begin(), calendar.end());
    panel.closes.resize(panel.dates.size() * panel.assets.size());
    for (size_t a = 0; a < panel.assets.size(); ++a) {
        const auto& closes = by_asset[panel.assets[a].asset_id].closes;
        for (size_t di = 0; di < panel.dates.size(); ++di)
            panel.closes[di * panel.assets.size() + a] = closes.at(panel.dates[di]);
    }
    return panel;
}

std::vector<WalkForwardSplit> make_walk_forward(const std::vector<Date>& dates,
                                                int first_test_year, int last_test_year,
                                                double validation_fraction) {
    if (dates.empty()) throw RangeError("make_walk_forward: no dates");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw RangeError("make_walk_forward: validation_fraction must lie in (0,1)");
    if (last_test_year < first_test_year)
        throw RangeError("make_walk_forward: last_test_year precedes first_test_year");
    if (dates.front().y >= first_test_year)
        throw RangeError("make_walk_forward: need at least one full year of history before " +
                         std::to_string(first_test_year) + ", data starts " +
                         dates.front().iso());

    std::vector<WalkForwardSplit> splits;
    for (int year = first_test_year; year <= last_test_year; ++year) {
        Date boundary{year, 1, 1};
        WalkForwardSplit s;
        s.test_year = year;
        s.validation_fraction = validation_fraction;
        size_t n_train = 0, n_test = 0;
        for (const auto& d : dates) {
            if (d < boundary) {
                if (n_train == 0) s.train_start = d;
                s.train_end = d;
                ++n_train;
            } else if (d.y == year) {
                if (n_test == 0) s.test_start = d;
                s.test_end = d;
                ++n_test;
            }
        }
        if (n_train == 0)
            throw RangeError("make_walk_forward: no training dates before " +
                             std::to_string(year));
        if (n_test == 0)
            throw RangeError("make_walk_forward: no dates in test year " + std::to_string(year));
        splits.push_back(s);
    }
    return splits;
}

TrainRangeIndices train_range_indices(const std::vector<Date>& dates,
                                      const WalkForwardSplit& split) {
    TrainRangeIndices r;
    size_t begin = dates.size(), end = 0;
    for (size_t i = 0; i < dates.size(); ++i) {
        if (dates[i] >= split.train_start && dates[i] <= split.train_end) {
            begin = std::min(begin, i);
            end = i + 1;
        }
    }
    if (begin >= end) throw RangeError("train_range_indices: split covers no dates");
    size_t n = end - begin;
    size_t n_val = static_cast<size_t>(std::llround(split.validation_fraction * n));
    n_val = std::min(std::max<size_t>(n_val, 1), n - 1);
    r.train_begin = begin;
    r.train_end = end;
    r.validation_begin = end - n_val;
    return r;
}

void save_panel_csv(const PricePanel& panel, const std::string& path) {
    auto f = open_out(path);
    f << "asset_id,ticker,date,close,sector_group\n";
    for (size_t di = 0; di < panel.n_dates(); ++di)
        for (size_t a = 0; a < panel.n_assets(); ++a) {
            const auto& meta = panel.assets[a];
            f << meta.asset_id << ',' << meta.ticker << ',' << panel.dates[di].iso() << ','
              << format_double(panel.close_at(di, a)) << ',' << kSectorGroups[meta.sector]
              << '\n';
        }
}

} // namespace mt
