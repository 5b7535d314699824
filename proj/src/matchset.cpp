#include "canet/matchset.hpp"

#include <algorithm>
#include <fstream>

#include "canet/error.hpp"

namespace canet {

std::size_t MatchSet::match_count() const {
    std::size_t n = 0;
    for (const auto& q : queries) n += q.matches.size();
    return n;
}

void rank_matches(QueryMatches& q, std::size_t limit) {
    std::sort(q.matches.begin(), q.matches.end(), [](const Match& a, const Match& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.source.row != b.source.row) return a.source.row < b.source.row;
        return a.source.col < b.source.col;
    });
    if (q.matches.size() > limit) q.matches.resize(limit);
}

nlohmann::json to_json(const MatchSet& m) {
    nlohmann::json queries = nlohmann::json::array();
    for (const auto& q : m.queries) {
        nlohmann::json matches = nlohmann::json::array();
        for (const auto& s : q.matches) {
            matches.push_back({{"row", s.source.row}, {"col", s.source.col}, {"score", s.score}});
        }
        queries.push_back({{"row", q.query.row}, {"col", q.query.col}, {"matches", matches}});
    }
    return {{"image_height", m.image_height},
            {"image_width", m.image_width},
            {"patch_size", data::kPatchSize},
            {"queries", queries}};
}

MatchSet matchset_from_json(const nlohmann::json& j) {
    MatchSet m;
    try {
        m.image_height = j.at("image_height");
        m.image_width = j.at("image_width");
        for (const auto& q : j.at("queries")) {
            QueryMatches qm;
            qm.query = data::PatchRef{0, q.at("row"), q.at("col")};
            for (const auto& s : q.at("matches")) {
                qm.matches.push_back(Match{data::PatchRef{0, s.at("row"), s.at("col")}, s.at("score")});
            }
            m.queries.push_back(std::move(qm));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DecodeError(std::string("malformed match set: ") + e.what());
    }
    return m;
}

void save_matchset(const MatchSet& m, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(m).dump(2) << '\n';
}

MatchSet load_matchset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return matchset_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw DecodeError("malformed match set " + path.string() + ": " + e.what());
    }
}

}  // namespace canet
