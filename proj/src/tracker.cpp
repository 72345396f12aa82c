#include "dfe/tracker.hpp"

#include "dfe/chi2.hpp"
#include "dfe/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace dfe {

TrackSequence track(const Autoencoder& model, std::size_t frame_count, const FrameSource& source, int ref_i,
                    int ref_j, const CropWindow& window, ReferenceMode mode, const FrameCallback& on_frame) {
    if (frame_count == 0) throw Error(ErrorCode::InvalidArgument, "no frames to track");
    const LabImage first = source(0);
    if (!crop_fits(first.width, first.height, ref_i, ref_j, window)) {
        throw Error(ErrorCode::OutOfBounds, "reference point (" + std::to_string(ref_i) + "," + std::to_string(ref_j) +
                                                ") has no full crop in frame 1");
    }
    TrackSequence seq;
    seq.mode = mode;
    LatentCode reference = encode(model, extract_crop(first, ref_i, ref_j, window));
    int last_i = ref_i, last_j = ref_j;
    for (std::size_t f = 0; f < frame_count; ++f) {
        MatchResult m;
        try {
            const LatentMap map = encode_dense(model, f == 0 ? first : source(f), window);
            m = match_in_map(map, reference);
            if (mode == ReferenceMode::updating) reference = map.code_at(m.pixel_i, m.pixel_j);
        } catch (const Error&) {
            if (f == 0) throw;
            m = MatchResult{};
            m.pixel_i = last_i;
            m.pixel_j = last_j;
            m.x = last_i;
            m.y = last_j;
            m.ssr_min = std::numeric_limits<double>::infinity();
            m.failed = true;
        }
        last_i = m.pixel_i;
        last_j = m.pixel_j;
        seq.results.push_back(m);
        if (on_frame) on_frame(f, m);
    }
    return seq;
}

TrackSequence track(const Autoencoder& model, std::span<const LabImage> frames, int ref_i, int ref_j,
                    const CropWindow& window, ReferenceMode mode, const FrameCallback& on_frame) {
    return track(model, frames.size(), [&](std::size_t f) { return frames[f]; }, ref_i, ref_j, window, mode,
                 on_frame);
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
        const std::size_t comma = line.find(',', start);
        std::string cell = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        cells.push_back(cell);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return cells;
}

template <class T>
bool parse(const std::string& s, T& v) {
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

std::string fmt(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace

GroundTruth read_ground_truth_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open ground truth " + path.string());
    GroundTruth gt;
    std::string line;
    int line_no = 0;
    int last = std::numeric_limits<int>::min();
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto cells = split_csv(line);
        int frame = 0;
        Point2d p;
        if (cells.size() < 3 || !parse(cells[0], frame) || !parse(cells[1], p.x) || !parse(cells[2], p.y)) {
            if (line_no == 1) continue; // header
            throw Error(ErrorCode::Io, path.string() + ":" + std::to_string(line_no) + ": expected frame,x,y");
        }
        if (frame <= last) {
            throw Error(ErrorCode::InvalidArgument, path.string() + ":" + std::to_string(line_no) +
                                                        ": frame numbers must be strictly increasing");
        }
        last = frame;
        gt.entries[frame] = p;
    }
    return gt;
}

TrackSequence read_track_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open track " + path.string());
    TrackSequence seq;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto cells = split_csv(line);
        int frame = 0, refined = 0;
        MatchResult m;
        if (cells.size() != 5 || !parse(cells[0], frame) || !parse(cells[1], m.x) || !parse(cells[2], m.y) ||
            !parse(cells[4], refined)) {
            if (line_no == 1) continue;
            throw Error(ErrorCode::Io, path.string() + ":" + std::to_string(line_no) + ": expected frame,x,y,ssr,refined");
        }
        if (!parse(cells[3], m.ssr_min)) m.ssr_min = cells[3] == "inf" ? std::numeric_limits<double>::infinity() : 0.0;
        if (frame != static_cast<int>(seq.results.size()) + 1) {
            throw Error(ErrorCode::InvalidArgument, path.string() + ":" + std::to_string(line_no) +
                                                        ": track frames must be numbered 1, 2, 3, ...");
        }
        m.refined = refined != 0;
        m.pixel_i = static_cast<int>(std::lround(m.x));
        m.pixel_j = static_cast<int>(std::lround(m.y));
        seq.results.push_back(m);
    }
    return seq;
}

void write_track_csv(const TrackSequence& track, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << "frame,x,y,ssr,refined\n";
    for (std::size_t f = 0; f < track.results.size(); ++f) {
        out << format_match_row(static_cast<int>(f) + 1, track.results[f]) << '\n';
    }
}

double max_possible_distance(int width, int height) { return std::hypot(width, height); }

std::vector<double> ci_curve(int n_frames, double p) {
    if (n_frames < 1) throw Error(ErrorCode::InvalidArgument, "CI curve needs at least one frame");
    std::vector<double> curve(static_cast<std::size_t>(n_frames));
    for (int t = 1; t <= n_frames; ++t) curve[static_cast<std::size_t>(t - 1)] = chi2_inv_cdf(p, 2 * t);
    return curve;
}

ErrorReport error_report(const TrackSequence& track, const GroundTruth& gt, const LabelingSigma& sigma,
                         double ci_probability) {
    if (!(sigma.sigma_x > 0.0 && sigma.sigma_y > 0.0)) {
        throw Error(ErrorCode::DegenerateSigma, "labeling sigmas must be > 0");
    }
    if (track.results.empty()) throw Error(ErrorCode::InvalidArgument, "empty track");
    ErrorReport report;
    report.ci_probability = ci_probability;
    const auto ci = ci_curve(static_cast<int>(track.results.size()), ci_probability);
    double cumulative = 0.0;
    double distance_sum = 0.0;
    for (std::size_t k = 0; k < track.results.size(); ++k) {
        const int frame = static_cast<int>(k) + 1;
        const auto it = gt.entries.find(frame);
        if (it == gt.entries.end()) {
            throw Error(ErrorCode::MissingGroundTruth, "no ground truth for frame " + std::to_string(frame));
        }
        FrameError e;
        e.frame = frame;
        e.ex = track.results[k].x - it->second.x;
        e.ey = track.results[k].y - it->second.y;
        e.distance = std::sqrt(e.ex * e.ex + e.ey * e.ey);
        e.standardized = e.ex * e.ex / (sigma.sigma_x * sigma.sigma_x) + e.ey * e.ey / (sigma.sigma_y * sigma.sigma_y);
        cumulative += e.standardized;
        e.cumulative = cumulative;
        e.ci = ci[k];
        distance_sum += e.distance;
        report.frames.push_back(e);
        report.sorted_errors.push_back(e.distance);
    }
    report.mean_error = distance_sum / static_cast<double>(report.frames.size());
    std::sort(report.sorted_errors.begin(), report.sorted_errors.end(), std::greater<>());
    report.first_exceed_frame = divergence_detect(report);
    report.diverged = report.first_exceed_frame.has_value();
    return report;
}

std::optional<int> divergence_detect(const ErrorReport& report) {
    for (const FrameError& e : report.frames) {
        if (e.cumulative > e.ci) return e.frame;
    }
    return std::nullopt;
}

void write_error_report(const ErrorReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto open = [&](const char* name) {
        std::ofstream out(dir / name);
        if (!out) throw Error(ErrorCode::Io, "cannot write " + (dir / name).string());
        return out;
    };
    {
        auto out = open("per_frame.csv");
        out << "frame,ex,ey,distance\n";
        for (const auto& e : report.frames) out << e.frame << ',' << fmt(e.ex) << ',' << fmt(e.ey) << ',' << fmt(e.distance) << '\n';
    }
    {
        auto out = open("sorted_errors.csv");
        out << "rank,distance\n";
        for (std::size_t k = 0; k < report.sorted_errors.size(); ++k) out << k + 1 << ',' << fmt(report.sorted_errors[k]) << '\n';
    }
    {
        auto out = open("cumulative.csv");
        out << "frame,standardized,cumulative,ci\n";
        for (const auto& e : report.frames) {
            out << e.frame << ',' << fmt(e.standardized) << ',' << fmt(e.cumulative) << ',' << fmt(e.ci) << '\n';
        }
    }
    {
        auto out = open("summary.csv");
        out << "mean_error_px,diverged,first_exceed_frame\n";
        out << fmt(report.mean_error) << ',' << (report.diverged ? 1 : 0) << ',';
        if (report.first_exceed_frame) out << *report.first_exceed_frame;
        out << '\n';
    }
}

LabelingTest labeling_chi_square(std::span<const std::vector<Point2d>> relabels, std::optional<LabelingSigma> sigma,
                                 double p) {
    if (relabels.empty()) throw Error(ErrorCode::InsufficientSamples, "no relabeled frames");
    std::vector<Point2d> errors;
    for (std::size_t f = 0; f < relabels.size(); ++f) {
        const auto& attempts = relabels[f];
        if (attempts.size() < 2) {
            throw Error(ErrorCode::InsufficientSamples, "frame " + std::to_string(f + 1) + " has " +
                                                            std::to_string(attempts.size()) + " labels, need >= 2");
        }
        Point2d mean;
        for (const auto& a : attempts) {
            mean.x += a.x;
            mean.y += a.y;
        }
        mean.x /= static_cast<double>(attempts.size());
        mean.y /= static_cast<double>(attempts.size());
        for (const auto& a : attempts) errors.push_back({a.x - mean.x, a.y - mean.y});
    }
    LabelingTest t;
    t.samples = static_cast<int>(errors.size());
    t.dof = 2 * t.samples;
    if (sigma) {
        t.sigma_x = sigma->sigma_x;
        t.sigma_y = sigma->sigma_y;
    } else {
        double sx = 0, sy = 0;
        for (const auto& e : errors) {
            sx += e.x * e.x;
            sy += e.y * e.y;
        }
        t.sigma_x = std::sqrt(sx / t.samples);
        t.sigma_y = std::sqrt(sy / t.samples);
    }
    if (!(t.sigma_x > 0.0 && t.sigma_y > 0.0)) {
        throw Error(ErrorCode::DegenerateSigma, "labeling error standard deviation is zero on at least one axis");
    }
    for (const auto& e : errors) {
        t.statistic += e.x * e.x / (t.sigma_x * t.sigma_x) + e.y * e.y / (t.sigma_y * t.sigma_y);
    }
    t.threshold = chi2_inv_cdf(p, t.dof);
    t.pass = t.statistic <= t.threshold;
    return t;
}

} // namespace dfe
