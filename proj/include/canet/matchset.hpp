#pragma once

#include <filesystem>
#include <json.hpp>
#include <vector>

#include "canet/datasets.hpp"

namespace canet {

struct Match {
    data::PatchRef source;
    double score = 0.0;
    bool operator==(const Match&) const = default;
};

// Ranked non-shadow sources for one shadow query patch. Scores descend;
// ties are ordered by (row, col) of the source.
struct QueryMatches {
    data::PatchRef query;
    std::vector<Match> matches;
    bool operator==(const QueryMatches&) const = default;
};

struct MatchSet {
    int image_height = 0;
    int image_width = 0;
    std::vector<QueryMatches> queries;

    bool empty() const { return queries.empty(); }
    std::size_t match_count() const;
    bool operator==(const MatchSet&) const = default;
};

// Sorts each query's matches by descending score (ties by source row, col)
// and truncates to `limit` entries.
void rank_matches(QueryMatches& q, std::size_t limit);

nlohmann::json to_json(const MatchSet& m);
MatchSet matchset_from_json(const nlohmann::json& j);
void save_matchset(const MatchSet& m, const std::filesystem::path& path);
MatchSet load_matchset(const std::filesystem::path& path);

}  // namespace canet
