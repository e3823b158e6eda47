#pragma once

#include "mt/errors.hpp"

#include <compare>
#include <cstdio>
#include <string>

namespace mt {

// Calendar date. Panels carry whatever trading calendar the input file uses;
// this type only needs ordering, ISO round-trips and weekday arithmetic for
// the synthetic-data generator.
struct Date {
    int y = 0;
    int m = 0;
    int d = 0;

    auto operator<=>(const Date&) const = default;

    bool valid() const {
        if (y < 1 || m < 1 || m > 12 || d < 1) return false;
        static const int md[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
        int dim = md[m - 1];
        if (m == 2 && ((y % 4 == 0 && y % 100 != 0) || y % 400 == 0)) dim = 29;
        return d <= dim;
    }

    std::string iso() const {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", y, m, d);
        return buf;
    }

    // Days since 1970-01-01 (proleptic Gregorian, Hinnant's civil algorithm).
    long serial() const {
        long yy = y - (m <= 2 ? 1 : 0);
        long era = (yy >= 0 ? yy : yy - 399) / 400;
        unsigned yoe = static_cast<unsigned>(yy - era * 400);
        unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
        unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        return era * 146097 + static_cast<long>(doe) - 719468;
    }

    static Date from_serial(long z) {
        z += 719468;
        long era = (z >= 0 ? z : z - 146096) / 146097;
        unsigned doe = static_cast<unsigned>(z - era * 146097);
        unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
        long yy = static_cast<long>(yoe) + era * 400;
        unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
        unsigned mp = (5 * doy + 2) / 153;
        unsigned dd = doy - (153 * mp + 2) / 5 + 1;
        unsigned mm = mp + (mp < 10 ? 3 : -9);
        return Date{static_cast<int>(yy + (mm <= 2 ? 1 : 0)), static_cast<int>(mm),
                    static_cast<int>(dd)};
    }

    // 0 = Monday ... 6 = Sunday.
    int weekday() const {
        long s = serial();
        return static_cast<int>(((s % 7) + 10) % 7);
    }

    bool is_weekday() const { return weekday() < 5; }

    Date next_weekday() const {
        long s = serial();
        do {
            ++s;
        } while (!Date::from_serial(s).is_weekday());
        return Date::from_serial(s);
    }
};

// Strict ISO-8601 (YYYY-MM-DD). Throws ParseError otherwise.
inline Date parse_date(const std::string& s) {
    if (s.size() != 10 || s[4] != '-' || s[7] != '-')
        throw ParseError("bad date '" + s + "' (expected YYYY-MM-DD)");
    for (int i : {0, 1, 2, 3, 5, 6, 8, 9})
        if (s[i] < '0' || s[i] > '9') throw ParseError("bad date '" + s + "'");
    Date dt{std::stoi(s.substr(0, 4)), std::stoi(s.substr(5, 2)), std::stoi(s.substr(8, 2))};
    if (!dt.valid()) throw ParseError("invalid calendar date '" + s + "'");
    return dt;
}

} // namespace mt
