#include "sem2/replay/replay.hpp"

#include "sem2/core/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>

namespace sem2 {

bool TransitionRecord::operator==(const TransitionRecord& o) const {
    return observation.h == o.observation.h && observation.w == o.observation.w &&
           observation.px == o.observation.px && mask.px == o.mask.px &&
           action.throttle == o.action.throttle && action.steer == o.action.steer &&
           reward == o.reward && termination == o.termination &&
           episode_id == o.episode_id && step_index == o.step_index;
}

const char* to_string(BucketKind k) {
    switch (k) {
        case BucketKind::common: return "common";
        case BucketKind::out_lane: return "out_lane";
        case BucketKind::collision: return "collision";
    }
    return "unknown";
}

MultiSourceBuffer::MultiSourceBuffer(ReplayConfig cfg) : cfg_(std::move(cfg)) {
    buckets_[0].capacity = cfg_.common_capacity;
    buckets_[1].capacity = cfg_.multisource ? cfg_.corner_capacity : 0;
    buckets_[2].capacity = cfg_.multisource ? cfg_.corner_capacity : 0;
}

void MultiSourceBuffer::validate(const Episode& episode) {
    if (episode.records.empty()) throw UsageError("add_episode: empty episode");
    for (size_t i = 0; i < episode.records.size(); ++i) {
        const auto& r = episode.records[i];
        if (i > 0 && r.step_index <= episode.records[i - 1].step_index)
            throw UsageError("add_episode: step_index must be strictly increasing");
        if (r.termination != Termination::none && i + 1 != episode.records.size())
            throw UsageError("add_episode: only the last record may be terminal");
    }
}

void MultiSourceBuffer::push_to(Bucket& bucket, Episode episode) {
    if (bucket.capacity == 0) return;
    bucket.transitions += episode.records.size();
    bucket.episodes.push_back(std::move(episode));
    while (bucket.transitions > bucket.capacity && !bucket.episodes.empty()) {
        bucket.transitions -= bucket.episodes.front().records.size();
        bucket.episodes.pop_front();
    }
}

void MultiSourceBuffer::add_episode(const Episode& episode) {
    validate(episode);
    std::lock_guard<std::mutex> lock(mu_);
    push_to(buckets_[0], episode);
    const Termination t = episode.final_termination();
    if (t == Termination::out_lane || t == Termination::collision) {
        const size_t tail =
            std::min<size_t>(2 * static_cast<size_t>(cfg_.sequence_length), episode.records.size());
        Episode corner;
        corner.id = episode.id;
        corner.layout = episode.layout;
        corner.seed = episode.seed;
        corner.records.assign(episode.records.end() - static_cast<long>(tail),
                              episode.records.end());
        push_to(buckets_[t == Termination::out_lane ? 1 : 2], std::move(corner));
    }
}

bool MultiSourceBuffer::can_sample(int L) const {
    std::lock_guard<std::mutex> lock(mu_);
    for (const auto& b : buckets_)
        for (const auto& e : b.episodes)
            if (e.records.size() >= static_cast<size_t>(L)) return true;
    return false;
}

SequenceBatch MultiSourceBuffer::sample_batch(int B, int L, Rng& rng) const {
    if (B < 1 || L < 1) throw UsageError("sample_batch: B and L must be >= 1");
    std::lock_guard<std::mutex> lock(mu_);

    auto eligible = [L](const Bucket& b) {
        std::vector<size_t> idx;
        for (size_t i = 0; i < b.episodes.size(); ++i)
            if (b.episodes[i].records.size() >= static_cast<size_t>(L)) idx.push_back(i);
        return idx;
    };
    std::vector<size_t> elig[3] = {eligible(buckets_[0]), eligible(buckets_[1]),
                                   eligible(buckets_[2])};

    SequenceBatch batch;
    batch.sequences.reserve(B);
    for (int s = 0; s < B; ++s) {
        int chosen = -1;
        for (int attempt = 0; attempt < 3; ++attempt) {
            const size_t k = rr_cursor_;
            rr_cursor_ = (rr_cursor_ + 1) % 3;
            if (!elig[k].empty()) {
                chosen = static_cast<int>(k);
                break;
            }
        }
        if (chosen < 0) throw UsageError("sample_batch: no bucket holds a length-" +
                                         std::to_string(L) + " sequence");
        const Bucket& b = buckets_[chosen];
        const size_t ei = elig[chosen][static_cast<size_t>(
            rng.uniform_int(static_cast<int64_t>(elig[chosen].size())))];
        const Episode& e = b.episodes[ei];
        const size_t max_start = e.records.size() - static_cast<size_t>(L);
        const size_t start = static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(max_start + 1)));
        SequenceSample seq;
        seq.source = static_cast<BucketKind>(chosen);
        seq.episode_id = e.id;
        seq.records.assign(e.records.begin() + static_cast<long>(start),
                           e.records.begin() + static_cast<long>(start + L));
        batch.sequences.push_back(std::move(seq));
    }
    return batch;
}

BufferStats MultiSourceBuffer::stats() const {
    std::lock_guard<std::mutex> lock(mu_);
    BufferStats s;
    BucketStats* out[3] = {&s.common, &s.out_lane, &s.collision};
    for (int i = 0; i < 3; ++i) {
        out[i]->episodes = buckets_[i].episodes.size();
        out[i]->transitions = buckets_[i].transitions;
    }
    return s;
}

// ---- episode dump ----

namespace {

constexpr char kMagic[8] = {'S', 'E', 'M', '2', 'E', 'P', 'I', 'S'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& f, T& v) {
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
}

} // namespace

void save_episode(const std::string& path, const Episode& episode) {
    if (episode.records.empty()) throw UsageError("save_episode: empty episode");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_episode: cannot open " + path);
    f.write(kMagic, sizeof(kMagic));
    write_pod(f, kVersion);
    nlohmann::json header = {
        {"episode_id", episode.id},
        {"layout", episode.layout},
        {"seed", episode.seed},
        {"records", episode.records.size()},
        {"termination", to_string(episode.final_termination())},
        {"height", episode.records.front().observation.h},
        {"width", episode.records.front().observation.w},
    };
    const std::string hs = header.dump();
    write_pod(f, static_cast<uint64_t>(hs.size()));
    f.write(hs.data(), static_cast<long>(hs.size()));
    for (const auto& r : episode.records) {
        write_pod(f, r.step_index);
        write_pod(f, static_cast<uint8_t>(r.termination));
        write_pod(f, r.action.throttle);
        write_pod(f, r.action.steer);
        write_pod(f, r.reward);
        f.write(reinterpret_cast<const char*>(r.observation.px.data()),
                static_cast<long>(r.observation.px.size()));
        f.write(reinterpret_cast<const char*>(r.mask.px.data()),
                static_cast<long>(r.mask.px.size()));
    }
    if (!f) throw IoError("save_episode: write failed for " + path);
}

Episode load_episode(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_episode: cannot open " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("load_episode: " + path + " is not an episode dump");
    uint32_t version = 0;
    read_pod(f, version);
    if (version != kVersion)
        throw IoError("load_episode: unsupported version " + std::to_string(version));
    uint64_t hlen = 0;
    read_pod(f, hlen);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<long>(hlen));
    nlohmann::json header = nlohmann::json::parse(hs);

    Episode e;
    e.id = header.at("episode_id").get<uint64_t>();
    e.layout = header.at("layout").get<std::string>();
    e.seed = header.at("seed").get<uint64_t>();
    const size_t count = header.at("records").get<size_t>();
    const int h = header.at("height").get<int>();
    const int w = header.at("width").get<int>();
    e.records.resize(count);
    for (auto& r : e.records) {
        uint8_t term = 0;
        read_pod(f, r.step_index);
        read_pod(f, term);
        r.termination = static_cast<Termination>(term);
        read_pod(f, r.action.throttle);
        read_pod(f, r.action.steer);
        read_pod(f, r.reward);
        r.episode_id = e.id;
        r.observation = Image(h, w, 3);
        r.mask = Image(h, w, 3);
        f.read(reinterpret_cast<char*>(r.observation.px.data()),
               static_cast<long>(r.observation.px.size()));
        f.read(reinterpret_cast<char*>(r.mask.px.data()),
               static_cast<long>(r.mask.px.size()));
    }
    if (!f) throw IoError("load_episode: truncated file " + path);
    return e;
}

} // namespace sem2
